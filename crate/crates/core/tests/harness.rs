use std::path::Path;
use std::process::{Command, Output};

use pstarc::harness::{loss_ablation, memory_accounting, Benchmark};
use pstarc::metrics::METRICS_CSV_HEADER;
use pstarc::tta::{LossTerms, TtaConfig};
use serde_json::Value;

fn run(args: &[&str], dir: &Path, seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pstarc"));
    cmd.args(args).current_dir(dir).env_remove("PSTARC_SEED");
    if let Some(s) = seed_env {
        cmd.env("PSTARC_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str], dir: &Path) {
    let out = run(args, dir, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_bench() -> Benchmark {
    Benchmark {
        source_per_class: 100,
        target_per_class: 60,
        ..Benchmark::default()
    }
}

/// Source data, a model and a bank under `dir`.
fn pipeline(dir: &Path) {
    ok(&["synth", "--out", "src", "--name", "source", "--dim", "6", "--classes", "3", "--per-class", "80"], dir);
    ok(
        &["synth", "--out", "tgt", "--name", "target", "--dim", "6", "--classes", "3", "--per-class", "50", "--seed", "4", "--angle", "30"],
        dir,
    );
    ok(&["train-source", "--out", "model", "--data", "src/source.csv", "--epochs", "3", "--feature-dim", "6", "--hidden", "12"], dir);
    ok(&["gen-bank", "--out", "bank", "--model", "model/model.json"], dir);
}

#[test]
fn metrics_rows_add_up_to_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pipeline(d);
    ok(
        &["tta", "--out", "tta", "--model", "model/model.json", "--bank", "bank/bank.json", "--data", "tgt/target.csv", "--batch-size", "32"],
        d,
    );
    let mut reader = csv::Reader::from_path(d.join("tta/metrics.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), METRICS_CSV_HEADER);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 150usize.div_ceil(32));

    let field = |r: &csv::StringRecord, name: &str| -> f64 {
        let i = METRICS_CSV_HEADER.iter().position(|&h| h == name).unwrap();
        r[i].parse().unwrap()
    };
    let (mut seen, mut hits) = (0.0, 0.0);
    for r in &rows {
        let now = field(r, "seen");
        hits += field(r, "batch_acc") * (now - seen);
        seen = now;
        assert!((field(r, "cum_acc") - hits / seen).abs() < 1e-9);
    }
    let summary = json(&d.join("tta/summary.json"));
    assert_eq!(seen, 150.0);
    assert!((summary["total_acc"].as_f64().unwrap() - hits / seen).abs() < 1e-9);
    for key in ["class_avg_acc", "per_class_recall", "config_digest", "seed"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
}

#[test]
fn deficient_bank_is_a_hard_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pipeline(d);
    let out = run(&["gen-bank", "--out", "thin", "--model", "model/model.json", "--per-class", "1"], d, None);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "bank_deficiency");
    assert_eq!(err["error"]["k"], 6);
    assert!(!err["error"]["deficient"].as_array().unwrap().is_empty());
    assert_eq!(json(&d.join("thin/error.json")), err);
}

#[test]
fn missing_input_fails_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["tta", "--out", "x", "--model", "nope.json", "--bank", "nope.json", "--data", "nope.csv"], tmp.path(), None);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["message"].is_string());
}

#[test]
fn seed_flag_beats_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let synth = ["synth", "--dim", "3", "--classes", "2", "--per-class", "5"];
    assert!(run(&[&synth[..], &["--out", "env"]].concat(), d, Some("7")).status.success());
    assert!(run(&[&synth[..], &["--out", "flag", "--seed", "3"]].concat(), d, Some("7")).status.success());
    assert_eq!(json(&d.join("env/run.json"))["seed"], 7);
    assert_eq!(json(&d.join("flag/run.json"))["seed"], 3);
}

#[test]
fn ablation_commands_emit_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let config = serde_json::json!({ "bench": small_bench() });
    std::fs::write(d.join("bench.json"), config.to_string()).unwrap();

    ok(&["ablate-losses", "--config", "bench.json", "--seeds", "0,1", "--out", "losses"], d);
    let table = json(&d.join("losses/ablate_losses.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 8);
    assert!(d.join("losses/ablate_losses.csv").exists());

    ok(&["ablate-batch", "--config", "bench.json", "--seeds", "0", "--sizes", "8,64", "--out", "batch"], d);
    let table = json(&d.join("batch/ablate_batch.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
    assert!(table["gap_64_8"].is_number());
}

#[test]
fn no_terms_means_no_adaptation() {
    let bench = small_bench();
    let inst = bench.prepare(0).unwrap();
    let target = bench.target(&inst, &bench.shift, 0).unwrap();
    let cfg = TtaConfig {
        losses: LossTerms::NONE,
        ..bench.tta_for(0)
    };
    let (_, adapted) = bench.adapt(&inst, &target, cfg).unwrap();
    assert_eq!(adapted, inst.model);
    let table = loss_ablation(&bench, &[inst], &[LossTerms::NONE]).unwrap();
    let cell = &table.rows[0].cells[0];
    assert!((cell.online_acc - cell.source_only).abs() < 1e-12);
}

#[test]
fn empty_bank_costs_nothing() {
    assert_eq!(memory_accounting(0, 256, 12).pstarc_scalars, 0);
}
