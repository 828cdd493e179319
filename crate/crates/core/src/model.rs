//! The source model `F = H ∘ G`: an MLP feature extractor with an optional
//! batch-norm head, followed by a bias-free weight-normalized linear
//! classifier.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{normal, rng_for, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{
    row_entropy, sgd_nesterov_step, BatchStats, BnMode, Matrix, Real, SgdMomentumState, Tape, Var,
    LOG_EPS,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Linear<T: Real> {
    /// `out × in`.
    #[serde(rename = "W")]
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BatchNorm<T: Real> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    fn new(d: usize) -> Self {
        Self {
            gamma: vec![T::one(); d],
            beta: vec![T::zero(); d],
            mean: vec![T::zero(); d],
            var: vec![T::one(); d],
        }
    }

    /// Folds batch statistics into the running estimates; the variance is
    /// stored unbiased (`n/(n−1)`) when the batch has more than one row.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        let n = stats.count;
        let correction = if n > 1 {
            T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * correction;
        }
    }
}

/// Layer sizes for [`SourceModel::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub batch_norm: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            feature_dim: 32,
            batch_norm: true,
        }
    }
}

/// `G`: every linear layer is followed by relu, the last one projects to the
/// feature dimension, then optional batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T: Real> {
    pub layers: Vec<Linear<T>>,
    pub bn: Option<BatchNorm<T>>,
}

/// Tape handles for the extractor's parameters.
#[derive(Clone, Debug)]
pub struct ExtractorVars {
    layers: Vec<(Var, Var)>,
    bn: Option<(Var, Var)>,
}

impl ExtractorVars {
    /// Parameter handles in [`FeatureExtractor::params_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        if let Some((g, b)) = self.bn {
            v.extend([g, b]);
        }
        v
    }
}

impl<T: Real> FeatureExtractor<T> {
    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().w.rows()
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ExtractorVars {
        let mut put = |m: Matrix<T>| if trainable { tape.leaf(m) } else { tape.constant(m) };
        let layers = self
            .layers
            .iter()
            .map(|l| (put(l.w.clone()), put(Matrix::row_vector(l.b.clone()))))
            .collect();
        let bn = self.bn.as_ref().map(|bn| {
            (
                put(Matrix::row_vector(bn.gamma.clone())),
                put(Matrix::row_vector(bn.beta.clone())),
            )
        });
        ExtractorVars { layers, bn }
    }

    /// Features for the rows of `x`. In train mode the batch-norm batch
    /// statistics are returned as well.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ExtractorVars,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let mut h = x;
        for &(w, b) in &vars.layers {
            let z = tape.matmul_t(h, w)?;
            let z = tape.add(z, b)?;
            h = tape.relu(z)?;
        }
        match (&self.bn, vars.bn) {
            (Some(bn), Some((gamma, beta))) => {
                let eps = T::of(BN_EPS);
                let bn_mode = match mode {
                    Mode::Train => BnMode::Train { eps },
                    Mode::Eval => BnMode::Eval {
                        mean: &bn.mean,
                        var: &bn.var,
                        eps,
                    },
                };
                tape.batch_norm(h, gamma, beta, bn_mode)
            }
            _ => Ok((h, None)),
        }
    }

    /// Mutable parameters, in [`ExtractorVars::all`] order.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for l in &mut self.layers {
            v.push(l.w.data_mut());
            v.push(&mut l.b);
        }
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }
}

/// `H`: logits `g_c · (v_c / ‖v_c‖) · f`, no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Classifier<T: Real> {
    /// `C × d` direction matrix.
    #[serde(rename = "V")]
    pub v: Matrix<T>,
    /// Per-class gain.
    pub g: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub v: Var,
    pub g: Var,
}

impl<T: Real> Classifier<T> {
    pub fn new(v: Matrix<T>, g: Vec<T>) -> Result<Self> {
        let c = Self { v, g };
        c.validate()?;
        Ok(c)
    }

    pub fn classes(&self) -> usize {
        self.v.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.v.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.g.len() != self.v.rows() {
            return Err(Error::dim(
                "Classifier",
                format!("{} gains for {} classes", self.g.len(), self.v.rows()),
            ));
        }
        if let Some(c) = self.v.row_iter().position(|r| r.iter().all(|&x| x == T::zero())) {
            return Err(Error::Config(format!("classifier direction {c} is the zero vector")));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ClassifierVars {
        let v = self.v.clone();
        let g = Matrix::column_vector(self.g.clone());
        if trainable {
            ClassifierVars {
                v: tape.leaf(v),
                g: tape.leaf(g),
            }
        } else {
            ClassifierVars {
                v: tape.constant(v),
                g: tape.constant(g),
            }
        }
    }

    pub fn logits_tape(&self, tape: &mut Tape<T>, vars: ClassifierVars, features: Var) -> Result<Var> {
        let dirs = tape.row_normalize(vars.v, T::of(NORM_EPS))?;
        let w = tape.scale_rows(dirs, vars.g)?;
        tape.matmul_t(features, w)
    }

    /// Softmax scores of `features` (rows), off-tape.
    pub fn probs(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let f = tape.constant(features.clone());
        let logits = self.logits_tape(&mut tape, vars, f)?;
        Ok(tape.value(logits).row_softmax())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub smoothing: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            momentum: 0.9,
            smoothing: 0.1,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceModel<T: Real> {
    pub extractor: FeatureExtractor<T>,
    pub classifier: Classifier<T>,
    pub meta: ModelMeta,
}

/// Outputs of a tape forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars<T> {
    pub features: Var,
    pub probs: Var,
    pub bn_stats: Option<BatchStats<T>>,
}

impl<T: Real> SourceModel<T> {
    /// He-initialized extractor, standard-normal classifier directions, unit gains.
    pub fn init(input_dim: usize, classes: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        if input_dim == 0 || classes == 0 {
            return Err(Error::Config("model needs D >= 1 and C >= 1".into()));
        }
        if arch.feature_dim < 2 {
            return Err(Error::Config(format!(
                "feature dim must be >= 2, got {}",
                arch.feature_dim
            )));
        }
        let mut rng = rng_for(seed, 13);
        let mut dims = vec![input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.feature_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                Linear {
                    w: Matrix::from_fn(fan_out, fan_in, |_, _| T::of(std * normal(&mut rng))),
                    b: vec![T::zero(); fan_out],
                }
            })
            .collect();
        let bn = arch.batch_norm.then(|| BatchNorm::new(arch.feature_dim));
        let v = Matrix::from_fn(classes, arch.feature_dim, |_, _| T::of(normal(&mut rng)));
        let classifier = Classifier::new(v, vec![T::one(); classes])?;
        Ok(Self {
            extractor: FeatureExtractor { layers, bn },
            classifier,
            meta: ModelMeta {
                input_dim,
                feature_dim: arch.feature_dim,
                classes,
                seed,
                train: None,
            },
        })
    }

    pub fn classes(&self) -> usize {
        self.meta.classes
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        let mut prev = self.meta.input_dim;
        for (i, l) in self.extractor.layers.iter().enumerate() {
            if l.w.cols() != prev || l.b.len() != l.w.rows() {
                return Err(Error::dim(
                    "SourceModel",
                    format!("layer {i} is {:?} with {} biases after width {prev}", l.w.shape(), l.b.len()),
                ));
            }
            prev = l.w.rows();
        }
        if self.extractor.layers.is_empty() || prev != self.meta.feature_dim {
            return Err(Error::dim("SourceModel", "extractor does not end at the feature dim"));
        }
        if let Some(bn) = &self.extractor.bn {
            if [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()] != [prev; 4] {
                return Err(Error::dim("SourceModel", "batch-norm width differs from feature dim"));
            }
        }
        if self.classifier.feature_dim() != prev || self.classifier.classes() != self.meta.classes {
            return Err(Error::dim(
                "SourceModel",
                format!("classifier {:?} vs d={prev}, C={}", self.classifier.v.shape(), self.meta.classes),
            ));
        }
        Ok(())
    }

    /// Records `x → features → probs` on `tape` using the given parameter handles.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        ext: &ExtractorVars,
        cls: ClassifierVars,
        x: Var,
        mode: Mode,
    ) -> Result<ForwardVars<T>> {
        let (features, bn_stats) = self.extractor.forward_tape(tape, ext, x, mode)?;
        let logits = self.classifier.logits_tape(tape, cls, features)?;
        let probs = tape.softmax(logits)?;
        Ok(ForwardVars {
            features,
            probs,
            bn_stats,
        })
    }

    /// `(features, probs)` for the rows of `x`. Never touches running statistics.
    pub fn forward(&self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, Matrix<T>)> {
        let mut tape = Tape::new();
        let ext = self.extractor.register(&mut tape, false);
        let cls = self.classifier.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_tape(&mut tape, &ext, cls, xv, mode)?;
        Ok((tape.value(out.features).clone(), tape.value(out.probs).clone()))
    }

    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        Ok(self.forward(x, Mode::Eval)?.1.argmax_rows())
    }

    pub fn accuracy(&self, ds: &Dataset<T>) -> Result<f64> {
        let pred = self.predict(&ds.x)?;
        let hits = pred.iter().zip(&ds.y).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / ds.len().max(1) as f64)
    }
}

/// `(1−α)·onehot(y) + α/C`.
pub fn label_smooth<T: Real>(y: usize, classes: usize, alpha: T) -> Vec<T> {
    let base = alpha / T::from_usize(classes).unwrap();
    (0..classes)
        .map(|c| if c == y { T::one() - alpha + base } else { base })
        .collect()
}

/// `e_k = −Σ_c p_kc ln(p_kc + ε)` per row.
pub fn entropy_of<T: Real>(probs: &Matrix<T>) -> Vec<T> {
    row_entropy(probs, T::of(LOG_EPS))
}

fn smoothed_targets<T: Real>(labels: &[usize], classes: usize, alpha: T) -> Matrix<T> {
    let rows = labels.iter().map(|&y| label_smooth(y, classes, alpha)).collect();
    Matrix::from_rows(rows).expect("rows share width")
}

/// Records the label-smoothed cross entropy `−mean_k Σ_c ỹ_kc ln(p_kc + ε)`.
pub fn smoothed_ce_tape<T: Real>(tape: &mut Tape<T>, probs: Var, targets: Var) -> Result<Var> {
    let logp = tape.log(probs, T::of(LOG_EPS))?;
    let prod = tape.mul(logp, targets)?;
    let per = tape.row_sum(prod)?;
    let m = tape.mean(per)?;
    tape.scale(m, -T::one())
}

/// Full-dataset label-smoothed loss with batch statistics and no updates.
pub fn source_loss<T: Real>(model: &SourceModel<T>, ds: &Dataset<T>, alpha: T) -> Result<T> {
    let mut tape = Tape::new();
    let ext = model.extractor.register(&mut tape, false);
    let cls = model.classifier.register(&mut tape, false);
    let x = tape.constant(ds.x.clone());
    let out = model.forward_tape(&mut tape, &ext, cls, x, Mode::Train)?;
    let targets = tape.constant(smoothed_targets(&ds.y, model.classes(), alpha));
    let loss = smoothed_ce_tape(&mut tape, out.probs, targets)?;
    Ok(tape.scalar(loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    /// [`source_loss`] after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minimizes the label-smoothed cross entropy over shuffled minibatches with
/// Nesterov SGD, updating extractor and classifier together. Batch norm runs
/// in train mode and its running statistics are frozen into the returned model.
pub fn train_source<T: Real>(
    mut model: SourceModel<T>,
    ds: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(SourceModel<T>, TrainReport)> {
    if ds.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if ds.dim() != model.meta.input_dim || ds.classes != model.classes() {
        return Err(Error::dim(
            "train_source",
            format!(
                "data is D={} C={}, model is D={} C={}",
                ds.dim(),
                ds.classes,
                model.meta.input_dim,
                model.classes()
            ),
        ));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.smoothing) {
        return Err(Error::Config("train batch size must be >= 1 and smoothing in [0, 1)".into()));
    }
    let alpha = T::of(cfg.smoothing);
    let (lr, mu) = (T::of(cfg.lr), T::of(cfg.momentum));

    let mut ext_states: Vec<SgdMomentumState<T>> = model
        .extractor
        .params_mut()
        .iter()
        .map(|p| SgdMomentumState::new(1, p.len(), lr, mu, true))
        .collect();
    let (c, d) = model.classifier.v.shape();
    let mut v_state = SgdMomentumState::new(c, d, lr, mu, true);
    let mut g_state = SgdMomentumState::new(c, 1, lr, mu, true);

    let initial_loss = source_loss(&model, ds, alpha)?.as_f64();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut rng = rng_for(cfg.seed, 17);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let at = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {bi}: {m}")),
                other => other,
            };
            let mut tape = Tape::new();
            let ext = model.extractor.register(&mut tape, true);
            let cls = model.classifier.register(&mut tape, true);
            let x = tape.constant(ds.x.select_rows(idx));
            let out = model
                .forward_tape(&mut tape, &ext, cls, x, Mode::Train)
                .map_err(at)?;
            let labels: Vec<usize> = idx.iter().map(|&i| ds.y[i]).collect();
            let targets = tape.constant(smoothed_targets(&labels, model.classes(), alpha));
            let loss = smoothed_ce_tape(&mut tape, out.probs, targets).map_err(at)?;
            tape.backward(loss)?;

            for ((p, var), st) in model
                .extractor
                .params_mut()
                .into_iter()
                .zip(ext.all())
                .zip(&mut ext_states)
            {
                let grad = Matrix::row_vector(tape.grad(var).data().to_vec());
                let mut pm = Matrix::row_vector(p.to_vec());
                sgd_nesterov_step(&mut pm, &grad, st)?;
                p.copy_from_slice(pm.data());
            }
            sgd_nesterov_step(&mut model.classifier.v, tape.grad(cls.v), &mut v_state)?;
            let mut g = Matrix::column_vector(model.classifier.g.clone());
            sgd_nesterov_step(&mut g, tape.grad(cls.g), &mut g_state)?;
            model.classifier.g = g.into_data();
            if let (Some(bn), Some(stats)) = (&mut model.extractor.bn, &out.bn_stats) {
                bn.update_running(stats);
            }
        }
        let l = source_loss(&model, ds, alpha)
            .map_err(|e| Error::Numeric(format!("after epoch {epoch}: {e}")))?
            .as_f64();
        if !l.is_finite() {
            return Err(Error::Numeric(format!("source loss diverged in epoch {epoch}")));
        }
        epoch_losses.push(l);
    }
    model.classifier.validate()?;
    model.meta.train = Some(cfg.clone());
    Ok((
        model,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct ModelFile<T: Real> {
    version: u32,
    #[serde(rename = "D")]
    input_dim: usize,
    d: usize,
    #[serde(rename = "C")]
    classes: usize,
    layers: Vec<Linear<T>>,
    classifier: Classifier<T>,
    bn: Option<BatchNorm<T>>,
    seed: u64,
    #[serde(default)]
    train: Option<TrainConfig>,
}

pub fn save_model<T: Real>(model: &SourceModel<T>, path: &Path) -> Result<()> {
    let file = ModelFile {
        version: MODEL_FORMAT_VERSION,
        input_dim: model.meta.input_dim,
        d: model.meta.feature_dim,
        classes: model.meta.classes,
        layers: model.extractor.layers.clone(),
        classifier: model.classifier.clone(),
        bn: model.extractor.bn.clone(),
        seed: model.meta.seed,
        train: model.meta.train.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Real>(path: &Path) -> Result<SourceModel<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile<T> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if file.version != MODEL_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: model format version {} unsupported",
            path.display(),
            file.version
        )));
    }
    let model = SourceModel {
        extractor: FeatureExtractor {
            layers: file.layers,
            bn: file.bn,
        },
        classifier: file.classifier,
        meta: ModelMeta {
            input_dim: file.input_dim,
            feature_dim: file.d,
            classes: file.classes,
            seed: file.seed,
            train: file.train,
        },
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    #[test]
    fn label_smoothing_values() {
        let y: Vec<f64> = label_smooth(0, 12, 0.1);
        assert!((y[0] - (0.9 + 0.1 / 12.0)).abs() < 1e-15);
        for &v in &y[1..] {
            assert!((v - 0.1 / 12.0).abs() < 1e-15);
        }
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(label_smooth::<f64>(2, 4, 0.0), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(label_smooth::<f64>(2, 4, 1.0).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn entropy_reference_values() {
        let uniform = Matrix::<f64>::filled(1, 12, 1.0 / 12.0);
        // ε inside the log costs about C·ε here.
        assert!((entropy_of(&uniform)[0] - 12f64.ln()).abs() < 1e-4);
        let onehot = Matrix::row_vector(vec![1.0f64, 0.0, 0.0]);
        assert!(entropy_of(&onehot)[0].abs() <= 1e-5);
        let half = Matrix::row_vector(vec![0.5f64, 0.5]);
        assert!((entropy_of(&half)[0] - 2f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn eval_forward_is_pure_and_normalized() {
        let m = SourceModel::<f64>::init(5, 3, &Architecture::default(), 1).unwrap();
        let x = Matrix::from_fn(4, 5, |r, c| (r as f64 - c as f64) * 0.3);
        let a = m.forward(&x, Mode::Eval).unwrap();
        let b = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        for s in a.1.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_norm_is_scale_invariant() {
        let m = SourceModel::<f64>::init(5, 4, &Architecture::default(), 2).unwrap();
        let x = Matrix::from_fn(6, 5, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let (_, p0) = m.forward(&x, Mode::Eval).unwrap();
        let mut scaled = m.clone();
        for (c, k) in [(0, 3.5), (2, 0.01), (3, 1e4)] {
            scaled.classifier.v.row_mut(c).iter_mut().for_each(|v| *v *= k);
        }
        let (_, p1) = scaled.forward(&x, Mode::Eval).unwrap();
        for (a, b) in p0.data().iter().zip(p1.data()) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300));
        }
        assert_eq!(p0.argmax_rows(), p1.argmax_rows());
    }

    #[test]
    fn zero_direction_rejected() {
        let v = Matrix::from_rows(vec![vec![1.0f64, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(Classifier::new(v, vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn source_loss_gradient_matches_finite_differences() {
        let arch = Architecture {
            hidden: vec![],
            feature_dim: 3,
            batch_norm: true,
        };
        let m = SourceModel::<f64>::init(4, 3, &arch, 5).unwrap();
        let x = Matrix::from_fn(2, 4, |r, c| 0.3 * r as f64 - 0.2 * c as f64 + 0.1);
        let labels = [0usize, 2];
        let targets = smoothed_targets::<f64>(&labels, 3, 0.1);

        let loss_at = |model: &SourceModel<f64>| {
            let mut t = Tape::new();
            let e = model.extractor.register(&mut t, true);
            let c = model.classifier.register(&mut t, true);
            let xv = t.constant(x.clone());
            let out = model.forward_tape(&mut t, &e, c, xv, Mode::Train).unwrap();
            let tv = t.constant(targets.clone());
            let l = smoothed_ce_tape(&mut t, out.probs, tv).unwrap();
            (t, e, c, l)
        };
        let (mut t, e, c, l) = loss_at(&m);
        t.backward(l).unwrap();

        // Classifier directions.
        let fd = finite_diff_grad(
            |v| {
                let mut mm = m.clone();
                mm.classifier.v = v.clone();
                let (t, .., l) = loss_at(&mm);
                t.scalar(l)
            },
            &m.classifier.v,
            1e-5,
        );
        assert!(max_relative_error(t.grad(c.v), &fd, 1e-8) < 1e-4);

        // Every extractor tensor.
        for (k, var) in e.all().into_iter().enumerate() {
            let base = Matrix::row_vector(m.clone().extractor.params_mut()[k].to_vec());
            let fd = finite_diff_grad(
                |p| {
                    let mut mm = m.clone();
                    mm.extractor.params_mut()[k].copy_from_slice(p.data());
                    let (t, .., l) = loss_at(&mm);
                    t.scalar(l)
                },
                &base,
                1e-5,
            );
            let an = Matrix::row_vector(t.grad(var).data().to_vec());
            let err = max_relative_error(&an, &fd, 1e-8);
            assert!(err < 1e-4, "param {k}: {err}");
        }
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = SourceModel::<f64>::init(3, 2, &Architecture::default(), 4).unwrap();
        save_model(&m, &path).unwrap();
        let back: SourceModel<f64> = load_model(&path).unwrap();
        assert_eq!(back, m);
        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["version", "D", "d", "C", "layers", "classifier", "bn", "seed"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["layers"][0].get("W").is_some());
        assert!(v["classifier"].get("V").is_some());
    }
}
