//! Pseudo-source feature bank.
//!
//! Random features are pushed through the frozen classifier and optimized so
//! that each one is confidently classified (low per-sample entropy) while the
//! bank as a whole covers every class (high entropy of the mean prediction).
//! The optimized features are then grouped by pseudo-label; those groups are
//! where adaptation looks up its positives.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{normal, rng_for};
use crate::error::{Error, Result};
use crate::model::{entropy_of, Classifier, ClassifierVars};
use crate::numerics::{adam_step, AdamState, Matrix, Real, Tape, Var, LOG_EPS};

pub const BANK_FORMAT_VERSION: u32 = 1;
const NORM_EPS: f64 = 1e-12;

/// `mean_i H(softmax(H(f_i)))`.
pub fn loss_ent_tape<T: Real>(tape: &mut Tape<T>, probs: Var) -> Result<Var> {
    let logp = tape.log(probs, T::of(LOG_EPS))?;
    let plogp = tape.mul(probs, logp)?;
    let per = tape.row_sum(plogp)?;
    let m = tape.mean(per)?;
    tape.scale(m, -T::one())
}

/// `Σ_c p̂_c ln(p̂_c + ε)` with `p̂` the column mean of the scores. Equals
/// `KL(p̂ ‖ uniform) − ln C` up to ε, so its minimum is `−ln C`.
pub fn loss_div_tape<T: Real>(tape: &mut Tape<T>, probs: Var) -> Result<Var> {
    let marginal = tape.col_mean(probs)?;
    let logm = tape.log(marginal, T::of(LOG_EPS))?;
    let prod = tape.mul(marginal, logm)?;
    tape.sum(prod)
}

fn bank_probs<T: Real>(tape: &mut Tape<T>, h: &Classifier<T>, cls: ClassifierVars, f: Var) -> Result<Var> {
    let logits = h.logits_tape(tape, cls, f)?;
    tape.softmax(logits)
}

/// Entropy loss of a feature matrix under a classifier.
pub fn loss_ent<T: Real>(features: &Matrix<T>, h: &Classifier<T>) -> Result<T> {
    let mut tape = Tape::new();
    let cls = h.register(&mut tape, false);
    let f = tape.constant(features.clone());
    let p = bank_probs(&mut tape, h, cls, f)?;
    let l = loss_ent_tape(&mut tape, p)?;
    Ok(tape.scalar(l))
}

/// Diversity loss of a feature matrix under a classifier.
pub fn loss_div<T: Real>(features: &Matrix<T>, h: &Classifier<T>) -> Result<T> {
    let mut tape = Tape::new();
    let cls = h.register(&mut tape, false);
    let f = tape.constant(features.clone());
    let p = bank_probs(&mut tape, h, cls, f)?;
    let l = loss_div_tape(&mut tape, p)?;
    Ok(tape.scalar(l))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankConfig {
    pub per_class: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            per_class: 20,
            steps: 50,
            lr: 0.01,
            beta: 5.0,
            seed: 0,
        }
    }
}

/// Loss values before each Adam step and once after the last.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub ent: Vec<f64>,
    pub div: Vec<f64>,
}

impl GenerationTrace {
    pub fn initial(&self) -> (f64, f64) {
        (self.ent[0], self.div[0])
    }

    pub fn last(&self) -> (f64, f64) {
        (*self.ent.last().unwrap(), *self.div.last().unwrap())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank<T: Real> {
    /// `N × d` raw features.
    pub features: Matrix<T>,
    /// `N × C` softmax scores under the source classifier.
    pub scores: Matrix<T>,
    /// Argmax of each score row.
    pub labels: Vec<usize>,
    /// Features scaled to unit row norm.
    pub normalized: Matrix<T>,
    /// `partitions[c]` lists the bank rows whose pseudo-label is `c`, ascending.
    pub partitions: Vec<Vec<usize>>,
    pub provenance: Option<BankConfig>,
}

impl<T: Real> FeatureBank<T> {
    /// Assembles a bank from features and their scores; pseudo-labels and
    /// partitions are derived from the scores.
    pub fn from_parts(features: Matrix<T>, scores: Matrix<T>, provenance: Option<BankConfig>) -> Result<Self> {
        if features.rows() != scores.rows() {
            return Err(Error::dim(
                "FeatureBank",
                format!("{} features but {} score rows", features.rows(), scores.rows()),
            ));
        }
        if scores.cols() == 0 {
            return Err(Error::dim("FeatureBank", "scores have no classes"));
        }
        let labels = scores.argmax_rows();
        let mut partitions = vec![Vec::new(); scores.cols()];
        for (i, &c) in labels.iter().enumerate() {
            partitions[c].push(i);
        }
        let normalized = features.row_l2_normalize(T::of(NORM_EPS));
        Ok(Self {
            features,
            scores,
            labels,
            normalized,
            partitions,
            provenance,
        })
    }

    /// Scores `features` with `h` and assembles the bank.
    pub fn from_features(features: Matrix<T>, h: &Classifier<T>, provenance: Option<BankConfig>) -> Result<Self> {
        let scores = h.probs(&features)?;
        Self::from_parts(features, scores, provenance)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.scores.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.partitions.iter().map(Vec::len).collect()
    }
}

/// Optimizes `per_class · C` standard-normal features for `steps` full-batch
/// Adam steps on `loss_ent + β·loss_div` with `h` frozen.
pub fn generate_feature_bank<T: Real>(h: &Classifier<T>, cfg: &BankConfig) -> Result<(FeatureBank<T>, GenerationTrace)> {
    h.validate()?;
    if cfg.per_class == 0 {
        return Err(Error::Config("bank needs at least one feature per class".into()));
    }
    let (c, d) = (h.classes(), h.feature_dim());
    let n = c * cfg.per_class;
    let mut rng = rng_for(cfg.seed, 19);
    let mut f = Matrix::from_fn(n, d, |_, _| T::of(normal(&mut rng)));
    let mut adam = AdamState::new(n, d, T::of(cfg.lr));
    let beta = T::of(cfg.beta);
    let mut trace = GenerationTrace::default();

    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let cls = h.register(&mut tape, false);
        let fv = tape.leaf(f.clone());
        let probs = bank_probs(&mut tape, h, cls, fv)?;
        let ent = loss_ent_tape(&mut tape, probs)?;
        let div = loss_div_tape(&mut tape, probs)?;
        trace.ent.push(tape.scalar(ent).as_f64());
        trace.div.push(tape.scalar(div).as_f64());
        if step == cfg.steps {
            break;
        }
        let weighted = tape.scale(div, beta)?;
        let total = tape.add(ent, weighted)?;
        if !tape.scalar(total).is_finite() {
            return Err(Error::Numeric(format!("bank loss at step {step}")));
        }
        tape.backward(total)?;
        adam_step(&mut f, tape.grad(fv), &mut adam)?;
        f.ensure_finite("bank update")?;
    }
    let bank = FeatureBank::from_features(f, h, Some(cfg.clone()))?;
    Ok((bank, trace))
}

/// Classes holding fewer than `k` bank features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankDeficiency {
    pub k: usize,
    /// `(class, count)` for every deficient class.
    pub deficient: Vec<(usize, usize)>,
}

impl fmt::Display for BankDeficiency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "need >= {} features per class;", self.k)?;
        for (c, n) in &self.deficient {
            write!(f, " class {c}: {n}")?;
        }
        Ok(())
    }
}

/// Ok iff every class partition holds at least `k` features.
pub fn validate_bank<T: Real>(bank: &FeatureBank<T>, k: usize) -> std::result::Result<(), BankDeficiency> {
    let deficient: Vec<(usize, usize)> = bank
        .partitions
        .iter()
        .enumerate()
        .filter(|(_, p)| p.len() < k)
        .map(|(c, p)| (c, p.len()))
        .collect();
    if deficient.is_empty() {
        Ok(())
    } else {
        Err(BankDeficiency { k, deficient })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub within_class_mean: Option<f64>,
    pub between_class_mean: Option<f64>,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankSummary {
    pub size: usize,
    pub per_class_counts: Vec<usize>,
    pub mean_entropy: f64,
    pub marginal_kl_to_uniform: f64,
    pub cosine: CosineStats,
}

/// Diagnostics: class balance, confidence, and how tightly features cluster by class.
pub fn bank_summary<T: Real>(bank: &FeatureBank<T>) -> BankSummary {
    let n = bank.len();
    let c = bank.classes();
    let ent = entropy_of(&bank.scores);
    let mean_entropy = if n == 0 {
        0.0
    } else {
        ent.iter().map(|e| e.as_f64()).sum::<f64>() / n as f64
    };
    let marginal: Vec<f64> = if n == 0 {
        vec![]
    } else {
        bank.scores.col_means().iter().map(|v| v.as_f64()).collect()
    };
    let uniform = 1.0 / c as f64;
    let marginal_kl_to_uniform = marginal
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p / uniform).ln())
        .sum();

    let gram = bank.normalized.matmul_t(&bank.normalized).expect("square");
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in (i + 1)..n {
            let s = gram.get(i, j).as_f64();
            lo = lo.min(s);
            hi = hi.max(s);
            if bank.labels[i] == bank.labels[j] {
                within += s;
                nw += 1;
            } else {
                between += s;
                nb += 1;
            }
        }
    }
    BankSummary {
        size: n,
        per_class_counts: bank.class_counts(),
        mean_entropy,
        marginal_kl_to_uniform,
        cosine: CosineStats {
            within_class_mean: (nw > 0).then(|| within / nw as f64),
            between_class_mean: (nb > 0).then(|| between / nb as f64),
            min: if lo.is_finite() { lo } else { 0.0 },
            max: if hi.is_finite() { hi } else { 0.0 },
        },
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct BankFile<T: Real> {
    version: u32,
    #[serde(rename = "C")]
    classes: usize,
    n_c: Option<usize>,
    d: usize,
    features: Matrix<T>,
    scores: Matrix<T>,
    labels: Vec<usize>,
    provenance: Option<BankConfig>,
}

pub fn save_bank<T: Real>(bank: &FeatureBank<T>, path: &Path) -> Result<()> {
    let file = BankFile {
        version: BANK_FORMAT_VERSION,
        classes: bank.classes(),
        n_c: bank.provenance.as_ref().map(|p| p.per_class),
        d: bank.feature_dim(),
        features: bank.features.clone(),
        scores: bank.scores.clone(),
        labels: bank.labels.clone(),
        provenance: bank.provenance.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a bank file; stored labels must agree with the argmax of the stored scores.
pub fn load_bank<T: Real>(path: &Path) -> Result<FeatureBank<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: BankFile<T> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if file.version != BANK_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: bank format version {} unsupported",
            path.display(),
            file.version
        )));
    }
    let bad = |msg: String| Error::Config(format!("{}: {msg}", path.display()));
    // An empty matrix deserializes with zero columns.
    if file.features.rows() > 0 && (file.features.cols() != file.d || file.scores.cols() != file.classes) {
        return Err(bad(format!(
            "features {:?} / scores {:?} disagree with d={} C={}",
            file.features.shape(),
            file.scores.shape(),
            file.d,
            file.classes
        )));
    }
    let bank = if file.features.rows() == 0 {
        FeatureBank::from_parts(Matrix::zeros(0, file.d), Matrix::zeros(0, file.classes), file.provenance)?
    } else {
        FeatureBank::from_parts(file.features, file.scores, file.provenance)?
    };
    if bank.labels != file.labels {
        return Err(bad("stored labels differ from the argmax of stored scores".into()));
    }
    Ok(bank)
}
