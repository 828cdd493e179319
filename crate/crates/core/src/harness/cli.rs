//! The `pstarc` command line.
//!
//! Every subcommand resolves its parameters in layers: built-in defaults,
//! then `PSTARC_SEED`, then the `--config` JSON file, then flags. The resolved
//! parameters are written to `run.json` in the output directory, and passing
//! that file back through `--config` (or `pstarc replay`) repeats the run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::{ablate_batch_size, ablate_losses, memory_accounting, memory_accounting_for, Benchmark, ShiftSpec, DEFAULT_BATCH_SIZES};
use crate::bank::{bank_summary, generate_feature_bank, load_bank, save_bank, validate_bank, BankConfig};
use crate::data::{batch_stream, AugmentConfig, load_dataset, make_shifted_domain, make_source_domain, save_dataset, DomainSpec};
use crate::error::{Error, Result};
use crate::metrics::emit_metrics;
use crate::model::{load_model, save_model, train_source, Architecture, SourceModel, TrainConfig};
use crate::tta::{run_ctta, run_tta, Adapter, LossTerms, TtaConfig};

pub const SEED_ENV: &str = "PSTARC_SEED";
pub const RUN_FILE: &str = "run.json";
pub const ERROR_FILE: &str = "error.json";

#[derive(Parser, Debug)]
#[command(name = "pstarc", version, about = "Test-time adaptation with a synthesized pseudo-source feature bank")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (CSV plus manifest).
    Synth(SynthArgs),
    /// Train a source model with label-smoothed cross entropy.
    TrainSource(TrainArgs),
    /// Synthesize and validate a pseudo-source feature bank.
    GenBank(BankArgs),
    /// Adapt online over one target dataset.
    Tta(TtaArgs),
    /// Adapt over several target datasets in sequence without resets.
    Ctta(CttaArgs),
    /// All eight on/off combinations of the three loss terms.
    AblateLosses(AblateLossesArgs),
    /// Accuracy as a function of test batch size.
    AblateBatch(AblateBatchArgs),
    /// Buffer sizes and pass counts.
    MemReport(MemArgs),
    /// Re-execute a run from its run.json.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Default, Serialize)]
pub struct Common {
    /// JSON parameters (a run.json is accepted as well).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A fully resolved subcommand configuration.
trait Params: Serialize + DeserializeOwned + Default {
    const COMMAND: &'static str;
    fn seed(&self) -> u64;
    fn out(&self) -> &Path;
}

macro_rules! params {
    ($ty:ty, $name:literal) => {
        impl Params for $ty {
            const COMMAND: &'static str = $name;
            fn seed(&self) -> u64 {
                self.seed
            }
            fn out(&self) -> &Path {
                &self.out
            }
        }
    };
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub params: Value,
}

fn drop_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, drop_nulls(v)))
                .collect(),
        ),
        other => other,
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn resolve<P: Params>(common: &Common, flags: &impl Serialize) -> Result<P> {
    let mut v = serde_json::to_value(P::default()).expect("parameters serialize");
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        merge(&mut v, json!({ "seed": seed }));
    }
    if let Some(path) = &common.config {
        let mut cfg = read_json(path)?;
        if let Ok(run) = serde_json::from_value::<RunFile>(cfg.clone()) {
            if run.command != P::COMMAND {
                return Err(Error::Config(format!(
                    "{} records a `{}` run, not `{}`",
                    path.display(),
                    run.command,
                    P::COMMAND
                )));
            }
            cfg = run.params;
        }
        merge(&mut v, cfg);
    }
    merge(&mut v, drop_nulls(serde_json::to_value(flags).expect("flags serialize")));
    merge(&mut v, drop_nulls(serde_json::to_value(common).expect("flags serialize")));
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: {e}", P::COMMAND)))
}

/// SHA-256 of the resolved parameters, output directory excluded.
pub fn config_digest(params: &impl Serialize) -> String {
    let mut v = serde_json::to_value(params).expect("parameters serialize");
    if let Value::Object(m) = &mut v {
        m.remove("out");
    }
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Creates the output directory and records `run.json`.
fn start<P: Params>(p: &P) -> Result<()> {
    fs::create_dir_all(p.out()).map_err(|e| Error::io(p.out(), e))?;
    let run = RunFile {
        command: P::COMMAND.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: p.seed(),
        params: serde_json::to_value(p).expect("parameters serialize"),
    };
    write_json(&p.out().join(RUN_FILE), &run)
}

/// Machine-readable description of a failure.
pub fn error_json(e: &Error) -> Value {
    let mut m = Map::new();
    m.insert("kind".into(), e.kind().into());
    m.insert("message".into(), e.to_string().into());
    if let Error::BankDeficiency(d) = e {
        m.insert("k".into(), d.k.into());
        m.insert("deficient".into(), json!(d.deficient));
    }
    json!({ "error": m })
}

fn execute<P: Params>(common: &Common, flags: &impl Serialize, body: impl FnOnce(&P) -> Result<()>) -> Result<()> {
    let p: P = resolve(common, flags)?;
    start(&p)?;
    body(&p).inspect_err(|e| {
        let _ = write_json(&p.out().join(ERROR_FILE), &error_json(e));
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => execute(&a.common, &a.flags, synth),
        Command::TrainSource(a) => execute(&a.common, &a.flags, train),
        Command::GenBank(a) => execute(&a.common, &a.flags, gen_bank),
        Command::Tta(a) => execute(&a.common, &a.flags, tta),
        Command::Ctta(a) => execute(&a.common, &a.flags, ctta),
        Command::AblateLosses(a) => execute(&a.common, &a.flags, ablate_losses_cmd),
        Command::AblateBatch(a) => execute(&a.common, &a.flags, ablate_batch_cmd),
        Command::MemReport(a) => execute(&a.common, &a.flags, mem_report),
        Command::Replay(a) => replay(&a),
    }
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let run: RunFile = serde_json::from_value(read_json(&a.run)?).map_err(|e| Error::json(&a.run, e))?;
    let common = Common {
        config: Some(a.run.clone()),
        seed: None,
        out: a.out.clone(),
    };
    match run.command.as_str() {
        "synth" => execute(&common, &SynthFlags::default(), synth),
        "train-source" => execute(&common, &TrainFlags::default(), train),
        "gen-bank" => execute(&common, &BankFlags::default(), gen_bank),
        "tta" => execute(&common, &TtaFlags::default(), tta),
        "ctta" => execute(&common, &CttaFlags::default(), ctta),
        "ablate-losses" => execute(&common, &AblateLossesFlags::default(), ablate_losses_cmd),
        "ablate-batch" => execute(&common, &AblateBatchFlags::default(), ablate_batch_cmd),
        "mem-report" => execute(&common, &MemFlags::default(), mem_report),
        other => Err(Error::Config(format!("unknown command `{other}` in {}", a.run.display()))),
    }
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// A run.json written by an earlier run.
    pub run: PathBuf,
    /// Output directory; defaults to the one recorded in run.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: SynthFlags,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct SynthFlags {
    /// File stem of the written CSV.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Distance of every class mean from the origin.
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub class_sigma: Option<f64>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Seed of the class means; keep it fixed across source and target files.
    #[arg(long)]
    pub means_seed: Option<u64>,
    /// Seed of the rotation basis and translation direction.
    #[arg(long)]
    pub shift_seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub shift: ShiftFlags,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct ShiftFlags {
    /// Rotation angle in degrees; 0 with no translation or noise gives the source domain.
    #[arg(long = "angle")]
    pub angle_deg: Option<f64>,
    #[arg(long)]
    pub translation: Option<f64>,
    #[arg(long = "noise")]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub seed: u64,
    pub out: PathBuf,
    pub name: String,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub class_sigma: f64,
    pub per_class: usize,
    pub means_seed: u64,
    pub shift_seed: u64,
    pub angle_deg: f64,
    pub translation: f64,
    pub noise_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        let b = Benchmark::default();
        Self {
            seed: 0,
            out: "out".into(),
            name: "data".into(),
            dim: b.dim,
            classes: b.classes,
            separation: b.separation,
            class_sigma: b.class_sigma,
            per_class: b.source_per_class,
            means_seed: 0,
            shift_seed: 0,
            angle_deg: 0.0,
            translation: 0.0,
            noise_sigma: 0.0,
        }
    }
}
params!(SynthParams, "synth");

fn synth(p: &SynthParams) -> Result<()> {
    let spec = DomainSpec::random_means(p.dim, p.classes, p.separation, p.class_sigma, p.per_class, p.means_seed)
        .with_seed(p.seed);
    let shift = ShiftSpec {
        angle_deg: p.angle_deg,
        translation: p.translation,
        noise_sigma: p.noise_sigma,
        basis: 0,
    };
    let ds = if shift == ShiftSpec::default() {
        make_source_domain::<f64>(&spec)?
    } else {
        make_shifted_domain::<f64>(&spec, &shift.build(p.dim, p.shift_seed))?
    };
    save_dataset(&ds, &p.out.join(format!("{}.csv", p.name)))
}

// train-source

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct TrainFlags {
    /// Labelled source CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub batch_norm: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub seed: u64,
    pub out: PathBuf,
    pub data: PathBuf,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub batch_norm: bool,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub smoothing: f64,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        let arch = Architecture::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            out: "out".into(),
            data: "data.csv".into(),
            hidden: arch.hidden,
            feature_dim: arch.feature_dim,
            batch_norm: arch.batch_norm,
            epochs: t.epochs,
            lr: t.lr,
            momentum: t.momentum,
            smoothing: t.smoothing,
            batch_size: t.batch_size,
        }
    }
}
params!(TrainParams, "train-source");

fn train(p: &TrainParams) -> Result<()> {
    let ds = load_dataset::<f64>(&p.data)?;
    let arch = Architecture {
        hidden: p.hidden.clone(),
        feature_dim: p.feature_dim,
        batch_norm: p.batch_norm,
    };
    let cfg = TrainConfig {
        epochs: p.epochs,
        lr: p.lr,
        momentum: p.momentum,
        smoothing: p.smoothing,
        batch_size: p.batch_size,
        seed: p.seed,
    };
    let model = SourceModel::init(ds.dim(), ds.classes, &arch, p.seed)?;
    let (model, report) = train_source(model, &ds, &cfg)?;
    let train_acc = model.accuracy(&ds)?;
    save_model(&model, &p.out.join("model.json"))?;
    write_json(
        &p.out.join("train_report.json"),
        &json!({
            "initial_loss": report.initial_loss,
            "epoch_losses": report.epoch_losses,
            "train_acc": train_acc,
        }),
    )
}

// gen-bank

#[derive(Args, Debug)]
pub struct BankArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: BankFlags,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct BankFlags {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Features per class (`n_c`).
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the diversity term.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Positives per sample the bank must support.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub exclude_nearest: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankParams {
    pub seed: u64,
    pub out: PathBuf,
    pub model: PathBuf,
    pub per_class: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
    pub k: usize,
    pub exclude_nearest: bool,
}

impl Default for BankParams {
    fn default() -> Self {
        let b = BankConfig::default();
        let t = TtaConfig::default();
        Self {
            seed: 0,
            out: "out".into(),
            model: "model.json".into(),
            per_class: b.per_class,
            steps: b.steps,
            lr: b.lr,
            beta: b.beta,
            k: t.k,
            exclude_nearest: t.exclude_nearest,
        }
    }
}
params!(BankParams, "gen-bank");

fn gen_bank(p: &BankParams) -> Result<()> {
    let model = load_model::<f64>(&p.model)?;
    let cfg = BankConfig {
        per_class: p.per_class,
        steps: p.steps,
        lr: p.lr,
        beta: p.beta,
        seed: p.seed,
    };
    let (bank, trace) = generate_feature_bank(&model.classifier, &cfg)?;
    save_bank(&bank, &p.out.join("bank.json"))?;
    let required = p.k + usize::from(p.exclude_nearest);
    let validation = validate_bank(&bank, required);
    write_json(
        &p.out.join("bank_summary.json"),
        &json!({
            "summary": bank_summary(&bank),
            "loss_ent": { "initial": trace.initial().0, "final": trace.last().0 },
            "loss_div": { "initial": trace.initial().1, "final": trace.last().1 },
            "required_per_class": required,
            "valid": validation.is_ok(),
        }),
    )?;
    validation.map_err(Error::BankDeficiency)
}

// tta / ctta

#[derive(Args, Debug, Default, Serialize)]
pub struct TtaConfigFlags {
    /// Positives per sample.
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the dispersion term.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub nesterov: Option<bool>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub exclude_nearest: Option<bool>,
    /// Loss terms to optimize: any of aug,attr,disp, or none.
    #[arg(long, value_parser = parse_losses)]
    pub losses: Option<LossTerms>,
    #[arg(long)]
    pub update_bn_stats: Option<bool>,
    #[command(flatten)]
    pub augment: AugmentFlags,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct AugmentFlags {
    #[arg(long = "aug-noise")]
    pub noise_sigma: Option<f64>,
    #[arg(long = "aug-dropout")]
    pub dropout: Option<f64>,
}

pub fn parse_losses(s: &str) -> std::result::Result<LossTerms, String> {
    let mut t = LossTerms::NONE;
    if s.trim() == "none" {
        return Ok(t);
    }
    for part in s.split([',', '+']).map(str::trim) {
        match part {
            "aug" => t.aug = true,
            "attr" => t.attr = true,
            "disp" => t.disp = true,
            other => return Err(format!("unknown loss term `{other}` (expected aug, attr, disp)")),
        }
    }
    Ok(t)
}

/// Shuffling and augmentation of domain `index` follow the run seed.
fn tta_config(base: &TtaConfig, seed: u64) -> TtaConfig {
    let mut cfg = base.clone();
    cfg.augment.seed = seed;
    cfg
}

#[derive(Args, Debug)]
pub struct TtaArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: TtaFlags,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct TtaFlags {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Target CSV; labels are used for scoring only.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub tta: TtaConfigFlags,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaParams {
    pub seed: u64,
    pub out: PathBuf,
    pub model: PathBuf,
    pub bank: PathBuf,
    pub data: PathBuf,
    pub tta: TtaConfig,
}

impl Default for TtaParams {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "out".into(),
            model: "model.json".into(),
            bank: "bank.json".into(),
            data: "data.csv".into(),
            tta: TtaConfig::default(),
        }
    }
}
params!(TtaParams, "tta");

fn tta(p: &TtaParams) -> Result<()> {
    let model = load_model::<f64>(&p.model)?;
    let bank = load_bank::<f64>(&p.bank)?;
    let ds = load_dataset::<f64>(&p.data)?;
    let cfg = tta_config(&p.tta, p.seed);
    let stream = batch_stream(&ds, cfg.batch_size, cfg.augment, p.seed)?;
    let mut adapter = Adapter::new(model, &bank, cfg)?;
    let record = run_tta(&mut adapter, stream)?;
    emit_metrics(
        &record,
        &p.out.join("metrics.csv"),
        &p.out.join("summary.json"),
        &config_digest(p),
        p.seed,
    )
}

#[derive(Args, Debug)]
pub struct CttaArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: CttaFlags,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct CttaFlags {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Target CSVs in adaptation order; repeat the flag or separate with commas.
    #[arg(long, value_delimiter = ',')]
    pub data: Option<Vec<PathBuf>>,
    #[command(flatten)]
    pub tta: TtaConfigFlags,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CttaParams {
    pub seed: u64,
    pub out: PathBuf,
    pub model: PathBuf,
    pub bank: PathBuf,
    pub data: Vec<PathBuf>,
    pub tta: TtaConfig,
}

impl Default for CttaParams {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "out".into(),
            model: "model.json".into(),
            bank: "bank.json".into(),
            data: Vec::new(),
            tta: TtaConfig::default(),
        }
    }
}
params!(CttaParams, "ctta");

fn ctta(p: &CttaParams) -> Result<()> {
    if p.data.is_empty() {
        return Err(Error::Config("ctta needs at least one --data file".into()));
    }
    let model = load_model::<f64>(&p.model)?;
    let bank = load_bank::<f64>(&p.bank)?;
    let sets = p.data.iter().map(|d| load_dataset::<f64>(d)).collect::<Result<Vec<_>>>()?;
    let cfg = tta_config(&p.tta, p.seed);
    let streams = sets
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let seed = p.seed.wrapping_add(i as u64);
            let aug = AugmentConfig { seed, ..cfg.augment };
            batch_stream(ds, cfg.batch_size, aug, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut adapter = Adapter::new(model, &bank, cfg)?;
    let report = run_ctta(&mut adapter, streams)?;
    let digest = config_digest(p);
    let mut domains = Vec::new();
    for (i, (record, path)) in report.domains.iter().zip(&p.data).enumerate() {
        emit_metrics(
            record,
            &p.out.join(format!("domain{i}_metrics.csv")),
            &p.out.join(format!("domain{i}_summary.json")),
            &digest,
            p.seed,
        )?;
        domains.push(json!({
            "data": path,
            "total_acc": record.summary.total_acc,
            "class_avg_acc": record.summary.class_avg_acc,
        }));
    }
    write_json(
        &p.out.join("sequence.json"),
        &json!({ "domains": domains, "mean_acc": report.mean_acc, "config_digest": digest, "seed": p.seed }),
    )
}

// ablations

fn default_seeds(seed: u64) -> Vec<u64> {
    (0..5).map(|i| seed.wrapping_add(i)).collect()
}

#[derive(Args, Debug, Default, Serialize)]
pub struct BenchFlags {
    /// Seeds of the grid, comma separated; defaults to five seeds from --seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
pub struct AblateLossesArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: AblateLossesFlags,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct AblateLossesFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub bench: BenchFlags,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateLossesParams {
    pub seed: u64,
    pub out: PathBuf,
    pub seeds: Option<Vec<u64>>,
    pub bench: Benchmark,
}
params!(AblateLossesParams, "ablate-losses");

fn ablate_losses_cmd(p: &AblateLossesParams) -> Result<()> {
    let seeds = p.seeds.clone().unwrap_or_else(|| default_seeds(p.seed));
    let table = ablate_losses(&p.bench, &seeds)?;
    write_json(&p.out.join("ablate_losses.json"), &table)?;
    let path = p.out.join("ablate_losses.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    w.write_record(["losses", "aug", "attr", "disp", "mean_acc", "std_acc", "mean_final_classes"]).map_err(wrap)?;
    for r in &table.rows {
        w.write_record([
            r.label.clone(),
            u8::from(r.terms.aug).to_string(),
            u8::from(r.terms.attr).to_string(),
            u8::from(r.terms.disp).to_string(),
            r.mean_acc.to_string(),
            r.std_acc.to_string(),
            r.mean_final_classes.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[derive(Args, Debug)]
pub struct AblateBatchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: AblateBatchFlags,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct AblateBatchFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub bench: BenchFlags,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateBatchParams {
    pub seed: u64,
    pub out: PathBuf,
    pub seeds: Option<Vec<u64>>,
    pub sizes: Vec<usize>,
    pub bench: Benchmark,
}

impl Default for AblateBatchParams {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "out".into(),
            seeds: None,
            sizes: DEFAULT_BATCH_SIZES.to_vec(),
            bench: Benchmark::default(),
        }
    }
}
params!(AblateBatchParams, "ablate-batch");

fn ablate_batch_cmd(p: &AblateBatchParams) -> Result<()> {
    let seeds = p.seeds.clone().unwrap_or_else(|| default_seeds(p.seed));
    let table = ablate_batch_size(&p.bench, &seeds, &p.sizes)?;
    write_json(&p.out.join("ablate_batch.json"), &table)?;
    let path = p.out.join("ablate_batch.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    w.write_record(["batch_size", "mean_acc", "std_acc"]).map_err(wrap)?;
    for r in &table.rows {
        w.write_record([r.batch_size.to_string(), r.mean_acc.to_string(), r.std_acc.to_string()])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

// mem-report

#[derive(Args, Debug)]
pub struct MemArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: MemFlags,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct MemFlags {
    /// Take N, d and C from a bank file.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Bank size N.
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub d: Option<u64>,
    #[arg(long)]
    pub c: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemParams {
    pub seed: u64,
    pub out: PathBuf,
    pub bank: Option<PathBuf>,
    pub n: u64,
    pub d: u64,
    pub c: u64,
}

impl Default for MemParams {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "out".into(),
            bank: None,
            n: 240,
            d: 256,
            c: 12,
        }
    }
}
params!(MemParams, "mem-report");

fn mem_report(p: &MemParams) -> Result<()> {
    let report = match &p.bank {
        Some(path) => memory_accounting_for(&load_bank::<f64>(path)?),
        None => memory_accounting(p.n, p.d, p.c),
    };
    write_json(&p.out.join("mem_report.json"), &report)?;
    // A closed pipe on stdout is not an error; the file above is the record.
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
