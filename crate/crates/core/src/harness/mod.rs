//! Experiment plumbing: the reference synthetic benchmark, the ablation
//! grids, memory accounting, and the command-line front end.

pub mod cli;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{generate_feature_bank, validate_bank, BankConfig, FeatureBank};
use crate::data::{batch_stream, make_shifted_domain, make_source_domain, rng_for, normal, Dataset, DomainSpec, Shift};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{train_source, Architecture, SourceModel, TrainConfig};
use crate::tta::{run_ctta, run_tta, Adapter, CttaReport, LossTerms, TtaConfig};

/// Rotation, translation and noise of one target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    pub angle_deg: f64,
    /// Length of a translation along a seeded random direction.
    pub translation: f64,
    pub noise_sigma: f64,
    /// Shifts with equal `basis` rotate within the same random planes.
    pub basis: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            angle_deg: 0.0,
            translation: 0.0,
            noise_sigma: 0.0,
            basis: 0,
        }
    }
}

impl ShiftSpec {
    pub fn rotation(angle_deg: f64) -> Self {
        Self {
            angle_deg,
            ..Self::default()
        }
    }

    pub fn build(&self, dim: usize, seed: u64) -> Shift {
        let mut rng = rng_for(seed, 23);
        let dir: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        Shift::uniform_rotation(dim, self.angle_deg.to_radians(), seed)
            .with_translation(dir.iter().map(|v| self.translation * v / norm).collect())
            .with_noise(self.noise_sigma)
    }
}

/// A synthetic source/target problem plus every setting needed to train a
/// source model, synthesize its bank, and adapt. One seed fixes everything.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Benchmark {
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub class_sigma: f64,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub shift: ShiftSpec,
    /// Domains for continual adaptation, in order.
    pub sequence: Vec<ShiftSpec>,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub bank: BankConfig,
    pub tta: TtaConfig,
}

impl Default for Benchmark {
    /// The reference shift: 12 Gaussian classes in 16 dimensions, target
    /// rotated by 44 degrees in every plane of a random basis.
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 12,
            separation: 4.0,
            class_sigma: 1.0,
            source_per_class: 200,
            target_per_class: 800,
            shift: ShiftSpec::rotation(44.0),
            sequence: vec![ShiftSpec::rotation(36.0), ShiftSpec::rotation(44.0), ShiftSpec::rotation(52.0)],
            arch: Architecture::default(),
            train: TrainConfig::default(),
            bank: BankConfig::default(),
            tta: TtaConfig {
                lr: 1e-2,
                ..TtaConfig::default()
            },
        }
    }
}

/// A trained source model and its bank for one seed.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub spec: DomainSpec,
    pub source: Dataset<f64>,
    pub model: SourceModel<f64>,
    pub bank: FeatureBank<f64>,
}

/// Outcome of adapting one instance to one target set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub source_only: f64,
    pub online_acc: f64,
    pub class_avg_acc: f64,
    /// Distinct classes among the online predictions.
    pub online_classes: usize,
    /// Distinct classes the adapted model predicts on the whole target set.
    pub final_classes: usize,
}

impl Benchmark {
    pub fn domain_spec(&self, seed: u64) -> DomainSpec {
        DomainSpec::random_means(
            self.dim,
            self.classes,
            self.separation,
            self.class_sigma,
            self.source_per_class,
            seed,
        )
    }

    /// Source data, trained source model, and a validated bank.
    pub fn prepare(&self, seed: u64) -> Result<Instance> {
        let spec = self.domain_spec(seed);
        let source = make_source_domain(&spec)?;
        let model = SourceModel::init(self.dim, self.classes, &self.arch, seed)?;
        let (model, _) = train_source(model, &source, &TrainConfig { seed, ..self.train.clone() })?;
        let (bank, _) = generate_feature_bank(&model.classifier, &BankConfig { seed, ..self.bank.clone() })?;
        validate_bank(&bank, self.tta.required_per_class()).map_err(Error::BankDeficiency)?;
        Ok(Instance {
            seed,
            spec,
            source,
            model,
            bank,
        })
    }

    /// Target samples for `shift`; `domain` separates the draws of
    /// different domains under the same seed.
    pub fn target(&self, inst: &Instance, shift: &ShiftSpec, domain: usize) -> Result<Dataset<f64>> {
        let spec = DomainSpec {
            samples_per_class: self.target_per_class,
            ..inst.spec.with_seed(inst.seed.wrapping_add(1000 * (domain as u64 + 1)))
        };
        let basis_seed = inst.seed.wrapping_add(7919 * (shift.basis + 1));
        make_shifted_domain(&spec, &shift.build(self.dim, basis_seed))
    }

    /// TTA settings for one seed: augmentation draws follow the seed.
    pub fn tta_for(&self, seed: u64) -> TtaConfig {
        let mut cfg = self.tta.clone();
        cfg.augment.seed = seed;
        cfg
    }

    /// Adapts a copy of the instance's model on `target`.
    pub fn adapt(&self, inst: &Instance, target: &Dataset<f64>, cfg: TtaConfig) -> Result<(MetricsRecord, SourceModel<f64>)> {
        let stream = batch_stream(target, cfg.batch_size, cfg.augment, inst.seed)?;
        let mut adapter = Adapter::new(inst.model.clone(), &inst.bank, cfg)?;
        let record = run_tta(&mut adapter, stream)?;
        Ok((record, adapter.into_model()))
    }

    pub fn cell(&self, inst: &Instance, target: &Dataset<f64>, cfg: TtaConfig) -> Result<CellResult> {
        let source_only = inst.model.accuracy(target)?;
        let (record, adapted) = self.adapt(inst, target, cfg)?;
        Ok(CellResult {
            seed: inst.seed,
            source_only,
            online_acc: record.summary.total_acc,
            class_avg_acc: record.summary.class_avg_acc,
            online_classes: record.summary.predicted_classes,
            final_classes: distinct(&adapted.predict(&target.x)?),
        })
    }

    pub fn prepare_all(&self, seeds: &[u64]) -> Result<Vec<Instance>> {
        seeds.par_iter().map(|&seed| self.prepare(seed)).collect()
    }

    /// Source-only versus adapted accuracy on the reference shift.
    pub fn run(&self, instances: &[Instance]) -> Result<Vec<CellResult>> {
        instances
            .par_iter()
            .map(|inst| {
                let target = self.target(inst, &self.shift, 0)?;
                self.cell(inst, &target, self.tta_for(inst.seed))
            })
            .collect()
    }

    /// Continual adaptation over [`Benchmark::sequence`] without resets.
    pub fn continual(&self, inst: &Instance) -> Result<ContinualResult> {
        let seed = inst.seed;
        let targets = self
            .sequence
            .iter()
            .enumerate()
            .map(|(i, s)| self.target(inst, s, i + 1))
            .collect::<Result<Vec<_>>>()?;
        let source_only = targets.iter().map(|t| inst.model.accuracy(t)).collect::<Result<Vec<_>>>()?;
        let cfg = self.tta_for(seed);
        let streams = targets
            .iter()
            .map(|t| batch_stream(t, cfg.batch_size, cfg.augment, seed))
            .collect::<Result<Vec<_>>>()?;
        let mut adapter = Adapter::new(inst.model.clone(), &inst.bank, cfg)?;
        let report = run_ctta(&mut adapter, streams)?;
        Ok(ContinualResult {
            seed,
            source_only,
            report,
        })
    }
}

fn distinct(labels: &[usize]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualResult {
    pub seed: u64,
    /// Unadapted accuracy per domain.
    pub source_only: Vec<f64>,
    pub report: CttaReport,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub terms: LossTerms,
    pub cells: Vec<CellResult>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_final_classes: f64,
}

impl AblationRow {
    fn new(label: String, terms: LossTerms, cells: Vec<CellResult>) -> Self {
        let accs: Vec<f64> = cells.iter().map(|c| c.online_acc).collect();
        let (mean_acc, std_acc) = mean_std(&accs);
        let mean_final_classes = cells.iter().map(|c| c.final_classes as f64).sum::<f64>() / cells.len().max(1) as f64;
        Self {
            label,
            terms,
            cells,
            mean_acc,
            std_acc,
            mean_final_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossAblation {
    pub seeds: Vec<u64>,
    pub source_only_mean: f64,
    pub rows: Vec<AblationRow>,
}

impl LossAblation {
    pub fn row(&self, terms: LossTerms) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.terms == terms)
    }
}

/// Every on/off combination of the three loss terms, per seed.
pub fn ablate_losses(bench: &Benchmark, seeds: &[u64]) -> Result<LossAblation> {
    loss_ablation(bench, &bench.prepare_all(seeds)?, &LossTerms::all_combinations())
}

pub fn loss_ablation(bench: &Benchmark, instances: &[Instance], combos: &[LossTerms]) -> Result<LossAblation> {
    if instances.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let per_seed = instances
        .par_iter()
        .map(|inst| {
            let target = bench.target(inst, &bench.shift, 0)?;
            combos
                .iter()
                .map(|&losses| bench.cell(inst, &target, TtaConfig { losses, ..bench.tta_for(inst.seed) }))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let source_only: Vec<f64> = per_seed.iter().map(|cells| cells[0].source_only).collect();
    let rows = combos
        .iter()
        .enumerate()
        .map(|(i, &terms)| AblationRow::new(terms.label(), terms, per_seed.iter().map(|c| c[i].clone()).collect()))
        .collect();
    Ok(LossAblation {
        seeds: instances.iter().map(|i| i.seed).collect(),
        source_only_mean: mean_std(&source_only).0,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSizeRow {
    pub batch_size: usize,
    pub cells: Vec<CellResult>,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchAblation {
    pub seeds: Vec<u64>,
    pub rows: Vec<BatchSizeRow>,
    /// `mean_acc(64) − mean_acc(8)` when both sizes were run.
    pub gap_64_8: Option<f64>,
}

impl BatchAblation {
    pub fn row(&self, batch_size: usize) -> Option<&BatchSizeRow> {
        self.rows.iter().find(|r| r.batch_size == batch_size)
    }
}

pub const DEFAULT_BATCH_SIZES: [usize; 5] = [8, 16, 32, 64, 128];

pub fn ablate_batch_size(bench: &Benchmark, seeds: &[u64], sizes: &[usize]) -> Result<BatchAblation> {
    batch_ablation(bench, &bench.prepare_all(seeds)?, sizes)
}

pub fn batch_ablation(bench: &Benchmark, instances: &[Instance], sizes: &[usize]) -> Result<BatchAblation> {
    if instances.is_empty() || sizes.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one batch size".into()));
    }
    let per_seed = instances
        .par_iter()
        .map(|inst| {
            let target = bench.target(inst, &bench.shift, 0)?;
            sizes
                .iter()
                .map(|&batch_size| bench.cell(inst, &target, TtaConfig { batch_size, ..bench.tta_for(inst.seed) }))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<BatchSizeRow> = sizes
        .iter()
        .enumerate()
        .map(|(i, &batch_size)| {
            let cells: Vec<CellResult> = per_seed.iter().map(|c| c[i].clone()).collect();
            let (mean_acc, std_acc) = mean_std(&cells.iter().map(|c| c.online_acc).collect::<Vec<_>>());
            BatchSizeRow {
                batch_size,
                cells,
                mean_acc,
                std_acc,
            }
        })
        .collect();
    let mean_of = |b: usize| rows.iter().find(|r| r.batch_size == b).map(|r| r.mean_acc);
    let gap_64_8 = mean_of(64).zip(mean_of(8)).map(|(a, b)| a - b);
    Ok(BatchAblation {
        seeds: instances.iter().map(|i| i.seed).collect(),
        rows,
        gap_64_8,
    })
}

/// Storage and pass counts of one adaptation method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCost {
    pub method: String,
    pub formula: String,
    /// `None` when the method keeps no buffer.
    pub buffer_scalars: Option<u64>,
    pub forwards_per_batch: u32,
    pub backwards_per_batch: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub bank_size: u64,
    pub feature_dim: u64,
    pub classes: u64,
    /// Bank features plus their scores: `N·(d + C)`.
    pub pstarc_scalars: u64,
    pub methods: Vec<MethodCost>,
    pub notes: Vec<String>,
}

/// Scalars held by a bank of `n` features of width `d` with `c` scores each.
pub fn bank_buffer_scalars(n: u64, d: u64, c: u64) -> u64 {
    n * (d + c)
}

/// Two queues: 16384 keys of width 256 with one label each, and 1024
/// features with 12 scores each.
pub const ADACONTRAST_SCALARS: u64 = 16384 * (256 + 1) + 1024 * (256 + 12);
/// 25 condensed 112×112 images for each of 12 classes.
pub const SOURCE_PROXY_SCALARS: u64 = 12 * 25 * 112 * 112;

pub fn memory_accounting(n: u64, d: u64, c: u64) -> MemoryReport {
    let pstarc = bank_buffer_scalars(n, d, c);
    let methods = vec![
        MethodCost {
            method: "pstarc".into(),
            formula: format!("{n}x({d}+{c})"),
            buffer_scalars: Some(pstarc),
            forwards_per_batch: 2,
            backwards_per_batch: 1,
        },
        MethodCost {
            method: "adacontrast".into(),
            formula: "16384x(256+1)+1024x(256+12)".into(),
            buffer_scalars: Some(ADACONTRAST_SCALARS),
            forwards_per_batch: 3,
            backwards_per_batch: 1,
        },
        MethodCost {
            method: "source-proxy".into(),
            formula: "12x25x112x112".into(),
            buffer_scalars: Some(SOURCE_PROXY_SCALARS),
            forwards_per_batch: 3,
            backwards_per_batch: 1,
        },
        MethodCost {
            method: "c-sfda".into(),
            formula: "none".into(),
            buffer_scalars: None,
            forwards_per_batch: 13,
            backwards_per_batch: 1,
        },
    ];
    MemoryReport {
        bank_size: n,
        feature_dim: d,
        classes: c,
        pstarc_scalars: pstarc,
        methods,
        notes: vec![
            "a 240x(256+12) bank is 64320 scalars (0.064M); the commonly quoted 0.03M does not follow from this formula".into(),
            "the two-queue formula gives 4485120 scalars (4.49M), not the commonly quoted 4.67M".into(),
        ],
    }
}

pub fn memory_accounting_for(bank: &FeatureBank<f64>) -> MemoryReport {
    memory_accounting(bank.len() as u64, bank.feature_dim() as u64, bank.classes() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_formulas() {
        let r = memory_accounting(240, 256, 12);
        assert_eq!(r.pstarc_scalars, 64_320);
        assert_eq!(ADACONTRAST_SCALARS, 4_485_120);
        assert_eq!(SOURCE_PROXY_SCALARS, 3_763_200);
        assert_eq!(memory_accounting(0, 256, 12).pstarc_scalars, 0);
        let p = &r.methods[0];
        assert_eq!((p.forwards_per_batch, p.backwards_per_batch), (2, 1));
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn shift_spec_translation_has_requested_length() {
        let s = ShiftSpec {
            angle_deg: 10.0,
            translation: 3.0,
            ..ShiftSpec::default()
        }
        .build(6, 4);
        let len = s.translation.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((len - 3.0).abs() < 1e-12);
        s.validate(6).unwrap();
    }
}
