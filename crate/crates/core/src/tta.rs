//! Online adaptation with pseudo-source guided clustering.
//!
//! Each test batch gets exactly one optimizer step on the feature extractor:
//!
//! 1. Train-mode forward of the batch and of its strong augmentation.
//! 2. Entropy threshold `τ = mean(e)`. A sample is LOW iff `e_k < τ`.
//! 3. LOW samples take as positives the scores of their `K` nearest bank
//!    features (cosine) within the bank partition of their pseudo-label.
//!    HIGH samples take their own detached prediction, repeated `K` times.
//! 4. Per sample: `L_aug = −p·p̃`, `L_attr = −Σ_j p·p⁺_j`,
//!    `L_disp = Σ_{j≠k} p_k·p_j`. Minimize `mean(L_aug + L_attr + λ·L_disp)`.
//! 5. Report eval-mode predictions of the updated model.
//!
//! The classifier and bank are never modified.

use serde::{Deserialize, Serialize};

use crate::bank::{validate_bank, BankDeficiency, FeatureBank};
use crate::data::{AugmentConfig, Batch, BatchStream};
use crate::error::{Error, Result};
use crate::metrics::{BatchLosses, MetricsRecord, Recorder};
use crate::model::{entropy_of, Mode, SourceModel};
use crate::numerics::{matrix, sgd_nesterov_step, BatchStats, Matrix, Real, SgdMomentumState, Tape, Var};

/// Which terms enter the optimized objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossTerms {
    pub aug: bool,
    pub attr: bool,
    pub disp: bool,
}

impl LossTerms {
    pub const ALL: Self = Self {
        aug: true,
        attr: true,
        disp: true,
    };
    pub const NONE: Self = Self {
        aug: false,
        attr: false,
        disp: false,
    };

    pub fn any(self) -> bool {
        self.aug || self.attr || self.disp
    }

    /// All eight on/off combinations, in binary order `(aug, attr, disp)`.
    pub fn all_combinations() -> Vec<Self> {
        (0..8u8)
            .map(|m| Self {
                aug: m & 4 != 0,
                attr: m & 2 != 0,
                disp: m & 1 != 0,
            })
            .collect()
    }

    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.aug {
            parts.push("aug");
        }
        if self.attr {
            parts.push("attr");
        }
        if self.disp {
            parts.push("disp");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    /// Positives per sample.
    pub k: usize,
    /// Weight of the dispersion term.
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    /// Fetch `K+1` neighbours and drop the most similar.
    pub exclude_nearest: bool,
    pub augment: AugmentConfig,
    pub losses: LossTerms,
    /// Fold train-mode batch statistics into the batch-norm running
    /// averages. Off by default so the eval-mode model changes only through
    /// gradient steps.
    #[serde(default)]
    pub update_bn_stats: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            k: 5,
            lambda: 1.0,
            lr: 5e-4,
            momentum: 0.9,
            nesterov: true,
            batch_size: 64,
            exclude_nearest: true,
            augment: AugmentConfig::default(),
            losses: LossTerms::ALL,
            update_bn_stats: false,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} invalid", self.lr)));
        }
        self.augment.validate()
    }

    /// Bank entries needed per class.
    pub fn required_per_class(&self) -> usize {
        self.k + usize::from(self.exclude_nearest)
    }
}

/// `τ = mean(e)`; `low[k]` iff `e_k < τ` strictly.
pub fn threshold<T: Real>(entropies: &[T]) -> (T, Vec<bool>) {
    assert!(!entropies.is_empty(), "threshold of an empty batch");
    let tau = entropies.iter().copied().sum::<T>() / T::from_usize(entropies.len()).unwrap();
    (tau, entropies.iter().map(|&e| e < tau).collect())
}

/// Bank rows chosen as positives for `query` within class `class`: cosine
/// ranking (ties to the lower bank index), top `K+1` minus the first when
/// `exclude_nearest`, else top `K`.
pub fn knn_indices<T: Real>(
    query: &[T],
    bank: &FeatureBank<T>,
    class: usize,
    k: usize,
    exclude_nearest: bool,
) -> Result<Vec<usize>> {
    let members = bank
        .partitions
        .get(class)
        .ok_or_else(|| Error::dim("knn_positives", format!("class {class} outside bank")))?;
    let need = k + usize::from(exclude_nearest);
    if members.len() < need {
        return Err(Error::BankDeficiency(BankDeficiency {
            k: need,
            deficient: vec![(class, members.len())],
        }));
    }
    if query.len() != bank.feature_dim() {
        return Err(Error::dim(
            "knn_positives",
            format!("query of width {}, bank d={}", query.len(), bank.feature_dim()),
        ));
    }
    let norm = matrix::l2_norm(query).max(T::of(1e-12));
    let mut ranked: Vec<(T, usize)> = members
        .iter()
        .map(|&i| (matrix::dot(bank.normalized.row(i), query) / norm, i))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(ranked[usize::from(exclude_nearest)..need].iter().map(|&(_, i)| i).collect())
}

/// Score rows (`K × C`) of the positives from [`knn_indices`].
pub fn knn_positives<T: Real>(
    query: &[T],
    bank: &FeatureBank<T>,
    class: usize,
    k: usize,
    exclude_nearest: bool,
) -> Result<Matrix<T>> {
    let idx = knn_indices(query, bank, class, k, exclude_nearest)?;
    Ok(bank.scores.select_rows(&idx))
}

/// Entropy split and positives of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Positives<T> {
    pub tau: T,
    pub low: Vec<bool>,
    /// Argmax of the train-mode predictions.
    pub pseudo: Vec<usize>,
    /// Row `k` is the sum of sample `k`'s `K` positive score rows.
    pub sums: Matrix<T>,
}

/// LOW samples draw positives from the bank partition of their pseudo-label;
/// HIGH samples use their own prediction `K` times.
pub fn select_positives<T: Real>(
    probs: &Matrix<T>,
    features: &Matrix<T>,
    bank: &FeatureBank<T>,
    cfg: &TtaConfig,
) -> Result<Positives<T>> {
    let (b, c) = probs.shape();
    let (tau, low) = threshold(&entropy_of(probs));
    let pseudo = probs.argmax_rows();
    let kt = T::from_usize(cfg.k).unwrap();
    let mut sums = Matrix::zeros(b, c);
    for i in 0..b {
        let row = sums.row_mut(i);
        if low[i] {
            let pos = knn_positives(features.row(i), bank, pseudo[i], cfg.k, cfg.exclude_nearest)?;
            for p in pos.row_iter() {
                row.iter_mut().zip(p).for_each(|(a, &v)| *a += v);
            }
        } else {
            row.iter_mut().zip(probs.row(i)).for_each(|(a, &v)| *a = kt * v);
        }
    }
    Ok(Positives { tau, low, pseudo, sums })
}

/// Per-sample `(L_aug, L_attr, L_disp)` columns: `−p·p̃`, `−p·s` and
/// `Σ_{j≠k} p_k·p_j`.
fn terms_tape<T: Real>(tape: &mut Tape<T>, p: Var, p_aug: Var, sums: Var) -> Result<(Var, Var, Var)> {
    let b = tape.value(p).rows();
    let off_diag = tape.constant(Matrix::from_fn(b, b, |r, c| if r == c { T::zero() } else { T::one() }));
    let pa = tape.mul(p, p_aug)?;
    let aug_dot = tape.row_sum(pa)?;
    let aug = tape.scale(aug_dot, -T::one())?;
    let pp = tape.mul(p, sums)?;
    let attr_dot = tape.row_sum(pp)?;
    let attr = tape.scale(attr_dot, -T::one())?;
    let gram = tape.matmul_t(p, p)?;
    let masked = tape.mul(gram, off_diag)?;
    let disp = tape.row_sum(masked)?;
    Ok((aug, attr, disp))
}

/// Per-sample objective terms for given predictions `p`, augmented
/// predictions `p_aug` and positive sums, all `B × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTerms<T> {
    pub aug: Vec<T>,
    pub attr: Vec<T>,
    pub disp: Vec<T>,
}

pub fn objective_terms<T: Real>(p: &Matrix<T>, p_aug: &Matrix<T>, sums: &Matrix<T>) -> Result<SampleTerms<T>> {
    if p.shape() != p_aug.shape() || p.shape() != sums.shape() {
        return Err(Error::dim(
            "objective_terms",
            format!("p {:?}, p_aug {:?}, sums {:?}", p.shape(), p_aug.shape(), sums.shape()),
        ));
    }
    let mut tape = Tape::new();
    let vars = [p, p_aug, sums].map(|m| tape.constant(m.clone()));
    let (aug, attr, disp) = terms_tape(&mut tape, vars[0], vars[1], vars[2])?;
    let col = |v: Var| tape.value(v).data().to_vec();
    Ok(SampleTerms {
        aug: col(aug),
        attr: col(attr),
        disp: col(disp),
    })
}

/// Objective value, its parts, and gradients for the extractor.
#[derive(Clone, Debug)]
pub struct ObjectiveEval<T> {
    /// `mean(L_aug + L_attr + λ·L_disp)` over the enabled terms.
    pub total: T,
    /// Batch means of the per-sample terms, enabled or not.
    pub aug: T,
    pub attr: T,
    pub disp: T,
    /// In [`FeatureExtractor::params_mut`](crate::model::FeatureExtractor::params_mut)
    /// order, flattened to rows; `None` when no term is enabled.
    pub grads: Option<Vec<Matrix<T>>>,
    pub bn_stats: Option<BatchStats<T>>,
}

/// Train-mode forward of `x` and `x_aug`, then the adaptation objective.
/// `positives` receives the predictions and features of `x` and returns the
/// `B × C` positive sums, which enter the objective as constants.
pub fn objective<T: Real>(
    model: &SourceModel<T>,
    x: &Matrix<T>,
    x_aug: &Matrix<T>,
    cfg: &TtaConfig,
    positives: impl FnOnce(&Matrix<T>, &Matrix<T>) -> Result<Matrix<T>>,
) -> Result<ObjectiveEval<T>> {
    if x.rows() == 0 || x.shape() != x_aug.shape() {
        return Err(Error::dim(
            "objective",
            format!("x {:?}, x_aug {:?}", x.shape(), x_aug.shape()),
        ));
    }
    let mut tape = Tape::new();
    let ext = model.extractor.register(&mut tape, true);
    let cls = model.classifier.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = model.forward_tape(&mut tape, &ext, cls, xv, Mode::Train)?;
    let xav = tape.constant(x_aug.clone());
    let out_aug = model.forward_tape(&mut tape, &ext, cls, xav, Mode::Train)?;

    let sums = positives(tape.value(out.probs), tape.value(out.features))?;
    if sums.shape() != tape.value(out.probs).shape() {
        return Err(Error::dim("objective", format!("positives {:?}", sums.shape())));
    }
    let sums = tape.constant(sums);
    let (aug, attr, disp) = terms_tape(&mut tape, out.probs, out_aug.probs, sums)?;

    let mut terms = Vec::new();
    if cfg.losses.aug {
        terms.push(aug);
    }
    if cfg.losses.attr {
        terms.push(attr);
    }
    if cfg.losses.disp {
        terms.push(tape.scale(disp, T::of(cfg.lambda))?);
    }
    let (aug, attr, disp) = (tape.value(aug).mean(), tape.value(attr).mean(), tape.value(disp).mean());

    let mut total = T::zero();
    let mut grads = None;
    if let Some((&first, rest)) = terms.split_first() {
        let mut per = first;
        for &t in rest {
            per = tape.add(per, t)?;
        }
        let root = tape.mean(per)?;
        total = tape.scalar(root);
        tape.backward(root)?;
        grads = Some(
            ext.all()
                .into_iter()
                .map(|v| Matrix::row_vector(tape.grad(v).data().to_vec()))
                .collect(),
        );
    }
    Ok(ObjectiveEval {
        total,
        aug,
        attr,
        disp,
        grads,
        bn_stats: out.bn_stats,
    })
}

/// Everything one adaptation step reports that does not need labels.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome<T> {
    pub predictions: Vec<usize>,
    /// Batch means of the per-sample terms, whether or not they were optimized.
    pub loss_aug: T,
    pub loss_attr: T,
    pub loss_disp: T,
    /// The optimized objective.
    pub total: T,
    pub tau: T,
    pub low: Vec<bool>,
}

impl<T: Real> StepOutcome<T> {
    pub fn low_fraction(&self) -> f64 {
        self.low.iter().filter(|&&l| l).count() as f64 / self.low.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome<T> {
    pub step: StepOutcome<T>,
    pub accuracy: f64,
}

/// A model being adapted online against a fixed bank.
#[derive(Clone, Debug)]
pub struct Adapter<'b, T: Real> {
    model: SourceModel<T>,
    bank: &'b FeatureBank<T>,
    cfg: TtaConfig,
    opt: Vec<SgdMomentumState<T>>,
    batches: usize,
}

impl<'b, T: Real> Adapter<'b, T> {
    /// Checks dimensions and that every class has enough bank entries.
    pub fn new(model: SourceModel<T>, bank: &'b FeatureBank<T>, cfg: TtaConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if bank.feature_dim() != model.meta.feature_dim || bank.classes() != model.classes() {
            return Err(Error::dim(
                "Adapter",
                format!(
                    "bank is d={} C={}, model is d={} C={}",
                    bank.feature_dim(),
                    bank.classes(),
                    model.meta.feature_dim,
                    model.classes()
                ),
            ));
        }
        validate_bank(bank, cfg.required_per_class()).map_err(Error::BankDeficiency)?;
        let mut model = model;
        let (lr, mu) = (T::of(cfg.lr), T::of(cfg.momentum));
        let opt = model
            .extractor
            .params_mut()
            .iter()
            .map(|p| SgdMomentumState::new(1, p.len(), lr, mu, cfg.nesterov))
            .collect();
        Ok(Self {
            model,
            bank,
            cfg,
            opt,
            batches: 0,
        })
    }

    pub fn model(&self) -> &SourceModel<T> {
        &self.model
    }

    pub fn into_model(self) -> SourceModel<T> {
        self.model
    }

    pub fn config(&self) -> &TtaConfig {
        &self.cfg
    }

    pub fn batches_seen(&self) -> usize {
        self.batches
    }

    /// One adaptation step on unlabeled inputs and their augmentations.
    pub fn adapt_step(&mut self, x: &Matrix<T>, x_aug: &Matrix<T>) -> Result<StepOutcome<T>> {
        let index = self.batches;
        self.batches += 1;
        self.step_inner(x, x_aug).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("batch {index}: {m}")),
            other => other,
        })
    }

    fn step_inner(&mut self, x: &Matrix<T>, x_aug: &Matrix<T>) -> Result<StepOutcome<T>> {
        let (bank, cfg) = (self.bank, &self.cfg);
        let mut selection = None;
        let eval = objective(&self.model, x, x_aug, cfg, |probs, features| {
            let sel = select_positives(probs, features, bank, cfg)?;
            let sums = sel.sums.clone();
            selection = Some(sel);
            Ok(sums)
        })?;
        let Positives { tau, low, .. } = selection.expect("positives selected");
        if let Some(grads) = &eval.grads {
            for ((param, grad), st) in self.model.extractor.params_mut().into_iter().zip(grads).zip(&mut self.opt) {
                let mut pm = Matrix::row_vector(param.to_vec());
                sgd_nesterov_step(&mut pm, grad, st)?;
                pm.ensure_finite("extractor update")?;
                param.copy_from_slice(pm.data());
            }
        }
        if self.cfg.update_bn_stats {
            if let (Some(bn), Some(stats)) = (&mut self.model.extractor.bn, &eval.bn_stats) {
                bn.update_running(stats);
            }
        }

        let predictions = self.model.predict(x)?;
        Ok(StepOutcome {
            predictions,
            loss_aug: eval.aug,
            loss_attr: eval.attr,
            loss_disp: eval.disp,
            total: eval.total,
            tau,
            low,
        })
    }

    /// [`Adapter::adapt_step`] on a batch, scored against its labels.
    pub fn adapt_batch(&mut self, batch: &Batch<T>) -> Result<BatchOutcome<T>> {
        let (x, x_aug) = batch.inputs();
        let step = self.adapt_step(x, x_aug)?;
        let hits = step
            .predictions
            .iter()
            .zip(batch.labels())
            .filter(|(p, y)| p == y)
            .count();
        let accuracy = hits as f64 / batch.len() as f64;
        Ok(BatchOutcome { step, accuracy })
    }
}

fn losses_of<T: Real>(s: &StepOutcome<T>) -> BatchLosses {
    BatchLosses {
        tau: s.tau.as_f64(),
        low_frac: s.low_fraction(),
        aug: s.loss_aug.as_f64(),
        attr: s.loss_attr.as_f64(),
        disp: s.loss_disp.as_f64(),
        total: s.total.as_f64(),
    }
}

/// One sequential pass over `stream`, adapting after every batch.
pub fn run_tta<T: Real>(adapter: &mut Adapter<'_, T>, stream: BatchStream<'_, T>) -> Result<MetricsRecord> {
    let mut rec = Recorder::new(adapter.model().classes());
    for batch in stream {
        let out = adapter.adapt_batch(&batch)?;
        rec.push(&out.step.predictions, batch.labels(), losses_of(&out.step));
    }
    Ok(rec.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CttaReport {
    pub domains: Vec<MetricsRecord>,
    /// Mean of the per-domain total accuracies.
    pub mean_acc: f64,
}

/// Domains in order, with no reset of model, optimizer, or bank in between.
pub fn run_ctta<'a, T: Real>(
    adapter: &mut Adapter<'_, T>,
    streams: impl IntoIterator<Item = BatchStream<'a, T>>,
) -> Result<CttaReport> {
    let mut domains = Vec::new();
    for stream in streams {
        domains.push(run_tta(adapter, stream)?);
    }
    if domains.is_empty() {
        return Err(Error::Config("continual adaptation needs at least one domain".into()));
    }
    let mean_acc = domains.iter().map(|d| d.summary.total_acc).sum::<f64>() / domains.len() as f64;
    Ok(CttaReport { domains, mean_acc })
}
