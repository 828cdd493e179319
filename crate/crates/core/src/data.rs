//! Synthetic domain-shift benchmarks, vector-space strong augmentation,
//! seeded batch streaming, and dataset files.
//!
//! A source domain is a mixture of isotropic Gaussian blobs, one per class.
//! A shifted domain draws fresh class-conditional samples and maps them
//! through `x ↦ R·x + t + η` with `R` orthogonal and `η ~ N(0, σ²I)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

const SOURCE_STREAM: u64 = 0;
const SHIFT_STREAM: u64 = 1;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class-conditional generator for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub dim: usize,
    pub classes: usize,
    /// `classes × dim`, one mean per class.
    pub means: Matrix<f64>,
    pub class_sigma: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl DomainSpec {
    /// Class means at `separation · u_c` for random unit directions `u_c`.
    pub fn random_means(
        dim: usize,
        classes: usize,
        separation: f64,
        class_sigma: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> Self {
        let mut rng = rng_for(seed, 7);
        let mut means = Matrix::from_fn(classes, dim, |_, _| normal(&mut rng));
        means = means.row_l2_normalize(1e-12).scale(separation);
        Self {
            dim,
            classes,
            means,
            class_sigma,
            samples_per_class,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 || self.dim < 1 {
            return Err(Error::Config(format!(
                "domain needs >= 1 class and >= 1 dim, got C={} D={}",
                self.classes, self.dim
            )));
        }
        if self.samples_per_class < 1 {
            return Err(Error::Config("samples_per_class must be >= 1".into()));
        }
        if self.means.shape() != (self.classes, self.dim) {
            return Err(Error::Config(format!(
                "means are {:?}, expected ({}, {})",
                self.means.shape(),
                self.classes,
                self.dim
            )));
        }
        if !(self.class_sigma >= 0.0 && self.class_sigma.is_finite()) {
            return Err(Error::Config(format!("class_sigma {} invalid", self.class_sigma)));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (Matrix<f64>, Vec<usize>) {
        let n = self.classes * self.samples_per_class;
        let mut x = Matrix::zeros(n, self.dim);
        let mut y = Vec::with_capacity(n);
        for c in 0..self.classes {
            for i in 0..self.samples_per_class {
                let r = c * self.samples_per_class + i;
                for (v, &m) in x.row_mut(r).iter_mut().zip(self.means.row(c)) {
                    *v = m + self.class_sigma * normal(rng);
                }
                y.push(c);
            }
        }
        (x, y)
    }
}

/// Covariate shift `x ↦ R·x + t + η`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub rotation: Matrix<f64>,
    pub translation: Vec<f64>,
    pub noise_sigma: f64,
}

impl Shift {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: Matrix::identity(dim),
            translation: vec![0.0; dim],
            noise_sigma: 0.0,
        }
    }

    /// Rotation by `angle` radians in the `(i, j)` coordinate plane.
    pub fn plane_rotation(dim: usize, i: usize, j: usize, angle: f64) -> Self {
        let mut r = Matrix::identity(dim);
        let (s, c) = angle.sin_cos();
        r.set(i, i, c);
        r.set(j, j, c);
        r.set(i, j, -s);
        r.set(j, i, s);
        Self {
            rotation: r,
            ..Self::identity(dim)
        }
    }

    /// Random orthonormal basis `Q`, then rotate every consecutive basis pair by
    /// `angle`: `R = Q · blockdiag(rot(angle), …) · Qᵀ`. Every vector in the span
    /// of the paired directions turns by exactly `angle`.
    pub fn uniform_rotation(dim: usize, angle: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, 11);
        let q = random_orthonormal(dim, &mut rng);
        let mut block = Matrix::identity(dim);
        let (s, c) = angle.sin_cos();
        for p in 0..dim / 2 {
            let (i, j) = (2 * p, 2 * p + 1);
            block.set(i, i, c);
            block.set(j, j, c);
            block.set(i, j, -s);
            block.set(j, i, s);
        }
        let rotation = q.matmul(&block).unwrap().matmul(&q.transpose()).unwrap();
        Self {
            rotation,
            ..Self::identity(dim)
        }
    }

    pub fn with_translation(mut self, translation: Vec<f64>) -> Self {
        self.translation = translation;
        self
    }

    pub fn with_noise(mut self, noise_sigma: f64) -> Self {
        self.noise_sigma = noise_sigma;
        self
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.rotation.shape() != (dim, dim) || self.translation.len() != dim {
            return Err(Error::Config(format!(
                "shift is {:?} with translation of {}, domain dim is {dim}",
                self.rotation.shape(),
                self.translation.len()
            )));
        }
        let rtr = self.rotation.transpose().matmul(&self.rotation)?;
        let dev = rtr.max_abs_diff(&Matrix::identity(dim))?;
        if dev > 1e-8 {
            return Err(Error::Config(format!(
                "rotation is not orthogonal: max |RᵀR − I| = {dev:e}"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} invalid", self.noise_sigma)));
        }
        Ok(())
    }
}

fn random_orthonormal(dim: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    // Gram-Schmidt on Gaussian columns, stored as columns of the result.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for u in &cols {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            cols.push(v);
        }
    }
    Matrix::from_fn(dim, dim, |r, c| cols[c][r])
}

/// Where a dataset came from; written to the manifest next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub spec: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub x: Matrix<T>,
    pub y: Vec<usize>,
    pub classes: usize,
    pub provenance: Option<Provenance>,
}

impl<T: Real> Dataset<T> {
    pub fn new(x: Matrix<T>, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dim(
                "Dataset::new",
                format!("{} rows but {} labels", x.rows(), y.len()),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            x,
            y,
            classes,
            provenance: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }
}

/// Draws the source domain: `samples_per_class` points per class, class-major order.
pub fn make_source_domain<T: Real>(spec: &DomainSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, SOURCE_STREAM);
    let (x, y) = spec.sample(&mut rng);
    let mut ds = Dataset::new(x.cast(), y, spec.classes)?;
    ds.provenance = Some(Provenance {
        seed: spec.seed,
        spec: serde_json::json!({ "domain": spec }),
    });
    Ok(ds)
}

/// Draws fresh class-conditional samples and pushes them through `shift`.
pub fn make_shifted_domain<T: Real>(spec: &DomainSpec, shift: &Shift) -> Result<Dataset<T>> {
    spec.validate()?;
    shift.validate(spec.dim)?;
    let mut rng = rng_for(spec.seed, SHIFT_STREAM);
    let (base, y) = spec.sample(&mut rng);
    let mut x = base.matmul_t(&shift.rotation)?;
    for r in 0..x.rows() {
        for (v, &t) in x.row_mut(r).iter_mut().zip(&shift.translation) {
            *v += t + shift.noise_sigma * normal(&mut rng);
        }
    }
    let mut ds = Dataset::new(x.cast(), y, spec.classes)?;
    ds.provenance = Some(Provenance {
        seed: spec.seed,
        spec: serde_json::json!({ "domain": spec, "shift": shift }),
    });
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    /// Probability of zeroing each coordinate, in `[0, 1)`.
    pub dropout: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("augment noise {} invalid", self.noise_sigma)));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            dropout: 0.2,
            seed: 0,
        }
    }
}

/// Stateful strong augmentation: each call consumes fresh randomness.
#[derive(Clone, Debug)]
pub struct Augmenter {
    cfg: AugmentConfig,
    rng: ChaCha8Rng,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            rng: rng_for(cfg.seed, 3),
        })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }
}

/// `mask ⊙ (X + N(0, σ²))`, each mask entry zero with probability `dropout`.
pub fn strong_augment<T: Real>(x: &Matrix<T>, aug: &mut Augmenter) -> Matrix<T> {
    let AugmentConfig {
        noise_sigma,
        dropout,
        ..
    } = aug.cfg;
    let rng = &mut aug.rng;
    x.map(|v| {
        let noisy = if noise_sigma > 0.0 {
            v + T::of(noise_sigma * normal(rng))
        } else {
            v
        };
        if dropout > 0.0 && rng.random::<f64>() < dropout {
            T::zero()
        } else {
            noisy
        }
    })
}

/// A test batch. Labels are held for scoring only.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    x: Matrix<T>,
    x_aug: Matrix<T>,
    labels: Vec<usize>,
    indices: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn new(x: Matrix<T>, x_aug: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if x.shape() != x_aug.shape() || labels.len() != x.rows() {
            return Err(Error::dim(
                "Batch::new",
                format!("x {:?}, x_aug {:?}, {} labels", x.shape(), x_aug.shape(), labels.len()),
            ));
        }
        let indices = (0..labels.len()).collect();
        Ok(Self {
            x,
            x_aug,
            labels,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Unlabeled view: the inputs and their strong augmentations.
    pub fn inputs(&self) -> (&Matrix<T>, &Matrix<T>) {
        (&self.x, &self.x_aug)
    }

    /// Ground truth, for evaluation only.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Positions of the batch rows in the source dataset.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// One shuffled pass over a dataset, `batch_size` rows at a time; the last
/// batch may be short.
#[derive(Clone, Debug)]
pub struct BatchStream<'a, T> {
    ds: &'a Dataset<T>,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    aug: Augmenter,
}

pub fn batch_stream<T: Real>(
    ds: &Dataset<T>,
    batch_size: usize,
    aug: AugmentConfig,
    seed: u64,
) -> Result<BatchStream<'_, T>> {
    if ds.is_empty() {
        return Err(Error::Config("cannot stream an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng_for(seed, 5));
    Ok(BatchStream {
        ds,
        order,
        pos: 0,
        batch_size,
        aug: Augmenter::new(aug)?,
    })
}

impl<T: Real> BatchStream<'_, T> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<T: Real> Iterator for BatchStream<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        let x = self.ds.x.select_rows(&idx);
        let x_aug = strong_augment(&x, &mut self.aug);
        let labels = idx.iter().map(|&i| self.ds.y[i]).collect();
        Some(Batch {
            x,
            x_aug,
            labels,
            indices: idx,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dim: usize,
    pub classes: usize,
    pub count: usize,
    pub seed: Option<u64>,
    pub spec: serde_json::Value,
}

/// `data.csv` → `data.manifest.json`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

/// Writes `label,f0,…,f{D-1}` CSV plus the JSON manifest.
pub fn save_dataset<T: Real>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (row, &label) in ds.x.row_iter().zip(&ds.y) {
        let mut rec = Vec::with_capacity(row.len() + 1);
        rec.push(label.to_string());
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let manifest = DatasetManifest {
        dim: ds.dim(),
        classes: ds.classes,
        count: ds.len(),
        seed: ds.provenance.as_ref().map(|p| p.seed),
        spec: ds
            .provenance
            .as_ref()
            .map_or(serde_json::Value::Null, |p| p.spec.clone()),
    };
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.into(),
            line,
            field: String::new(),
            message: format!("{other:?}"),
        },
    }
}

/// Reads a dataset CSV; the class count comes from the manifest when present,
/// else from the largest label.
pub fn load_dataset<T: Real>(path: &Path) -> Result<Dataset<T>> {
    let parse_err = |line: usize, field: &str, message: String| Error::Parse {
        path: path.into(),
        line,
        field: field.into(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = r.headers().map_err(|e| csv_io(path, e))?.clone();
    if header.get(0) != Some("label") {
        return Err(parse_err(1, "label", "first column must be `label`".into()));
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(1, name, format!("expected column `f{i}`")));
        }
    }
    let dim = header.len() - 1;
    let mut data = Vec::new();
    let mut y = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 1 {
            return Err(parse_err(line, "", format!("{} fields, expected {}", rec.len(), dim + 1)));
        }
        let label: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, "label", format!("`{}` is not a class index", &rec[0])))?;
        y.push(label);
        for (i, field) in rec.iter().skip(1).enumerate() {
            let v: T = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, &format!("f{i}"), format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, &format!("f{i}"), "value is not finite".into()));
            }
            data.push(v);
        }
    }
    let x = Matrix::new(y.len(), dim, data)?;

    let mpath = manifest_path(path);
    let manifest: Option<DatasetManifest> = if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?)
    } else {
        None
    };
    let classes = match &manifest {
        Some(m) => {
            if m.dim != dim || m.count != y.len() {
                return Err(Error::Config(format!(
                    "{}: manifest says {}x{}, CSV holds {}x{dim}",
                    mpath.display(),
                    m.count,
                    m.dim,
                    y.len()
                )));
            }
            m.classes
        }
        None => y.iter().max().map_or(0, |m| m + 1),
    };
    let mut ds = Dataset::new(x, y, classes)?;
    ds.provenance = manifest.and_then(|m| m.seed.map(|seed| Provenance { seed, spec: m.spec }));
    Ok(ds)
}
