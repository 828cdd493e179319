use std::collections::BTreeSet;

use pstarc::data::{batch_stream, Batch};
use pstarc::harness::{Benchmark, Instance};
use pstarc::numerics::{sgd_nesterov_step, Matrix, SgdMomentumState};
use pstarc::tta::{objective, objective_terms, run_ctta, Adapter, TtaConfig};
use proptest::prelude::*;

fn m(rows: Vec<Vec<f64>>) -> Matrix<f64> {
    Matrix::from_rows(rows).unwrap()
}

#[test]
fn dispersion_of_two_samples() {
    let same = m(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
    let t = objective_terms(&same, &same, &same).unwrap();
    assert_eq!(t.disp, vec![1.0, 1.0]);

    let apart = m(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let t = objective_terms(&apart, &apart, &apart).unwrap();
    assert_eq!(t.disp, vec![0.0, 0.0]);
}

#[test]
fn perfect_consistency_gives_minus_one() {
    let p = m(vec![vec![0.0, 1.0, 0.0]]);
    let t = objective_terms(&p, &p, &p.scale(5.0)).unwrap();
    assert_eq!(t.aug, vec![-1.0]);
    assert_eq!(t.attr, vec![-5.0]);
}

fn simplex_rows(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap().row_softmax())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn agreeing_with_positives_lowers_attraction(p in simplex_rows(3, 4), s in simplex_rows(3, 4), t in 0.05f64..1.0) {
        let s = s.scale(5.0);
        let base = objective_terms(&p, &p, &s).unwrap();
        let mut moved = p.clone();
        for (k, best) in s.argmax_rows().into_iter().enumerate() {
            for (c, v) in moved.row_mut(k).iter_mut().enumerate() {
                *v = (1.0 - t) * *v + if c == best { t } else { 0.0 };
            }
        }
        let after = objective_terms(&moved, &moved, &s).unwrap();
        for k in 0..3 {
            prop_assert!(after.attr[k] < base.attr[k]);
        }
    }

    #[test]
    fn agreeing_with_the_batch_raises_dispersion(p in simplex_rows(3, 4), t in 0.05f64..1.0) {
        let base = objective_terms(&p, &p, &p).unwrap();
        // Pull sample 1 toward the top class of sample 0.
        let top = p.argmax_rows()[0];
        let mut moved = p.clone();
        for (c, v) in moved.row_mut(1).iter_mut().enumerate() {
            *v = (1.0 - t) * *v + if c == top { t } else { 0.0 };
        }
        let after = objective_terms(&moved, &moved, &moved).unwrap();
        prop_assert!(after.disp[0] > base.disp[0]);
    }
}

fn small_bench() -> Benchmark {
    Benchmark {
        target_per_class: 100,
        ..Benchmark::default()
    }
}

#[test]
fn predictions_depend_only_on_the_past() {
    let bench = small_bench();
    let inst = bench.prepare(0).unwrap();
    let target = bench.target(&inst, &bench.shift, 0).unwrap();
    let cfg = bench.tta_for(0);
    let batches: Vec<Batch<f64>> = batch_stream(&target, cfg.batch_size, cfg.augment, 0).unwrap().collect();
    let replay = |n: usize| -> Vec<Vec<usize>> {
        let mut adapter = Adapter::new(inst.model.clone(), &inst.bank, cfg.clone()).unwrap();
        batches[..n]
            .iter()
            .map(|b| adapter.adapt_batch(b).unwrap().step.predictions)
            .collect()
    };
    let full = replay(batches.len());
    for n in [1, 3, batches.len() / 2] {
        assert_eq!(replay(n), full[..n], "prefix of {n} batches");
    }
}

#[test]
fn full_objective_keeps_every_class() {
    let bench = small_bench();
    let inst = bench.prepare(1).unwrap();
    let target = bench.target(&inst, &bench.shift, 0).unwrap();
    let cell = bench.cell(&inst, &target, bench.tta_for(1)).unwrap();
    assert_eq!(cell.online_classes, bench.classes);
}

/// Repeated steps of the objective when every positive is class 0.
fn distinct_after_pull(inst: &Instance, target: &pstarc::data::Dataset<f64>, lambda: f64) -> usize {
    let cfg = TtaConfig {
        lambda,
        lr: 0.05,
        ..TtaConfig::default()
    };
    let mut model = inst.model.clone();
    let mut opt: Vec<SgdMomentumState<f64>> = model
        .extractor
        .params_mut()
        .iter()
        .map(|p| SgdMomentumState::new(1, p.len(), cfg.lr, cfg.momentum, true))
        .collect();
    for batch in batch_stream(target, cfg.batch_size, cfg.augment, 0).unwrap() {
        let (x, xa) = batch.inputs();
        let eval = objective(&model, x, xa, &cfg, |p, _| {
            Ok(Matrix::from_fn(p.rows(), p.cols(), |_, c| if c == 0 { cfg.k as f64 } else { 0.0 }))
        })
        .unwrap();
        let grads = eval.grads.unwrap();
        for ((param, g), st) in model.extractor.params_mut().into_iter().zip(&grads).zip(&mut opt) {
            let mut pm = Matrix::row_vector(param.to_vec());
            sgd_nesterov_step(&mut pm, g, st).unwrap();
            param.copy_from_slice(pm.data());
        }
    }
    model.predict(&target.x).unwrap().into_iter().collect::<BTreeSet<_>>().len()
}

#[test]
fn without_dispersion_a_one_class_pull_collapses() {
    let bench = small_bench();
    let inst = bench.prepare(2).unwrap();
    let target = bench.target(&inst, &bench.shift, 0).unwrap();
    let before = inst.model.predict(&target.x).unwrap().into_iter().collect::<BTreeSet<_>>().len();
    let collapsed = distinct_after_pull(&inst, &target, 0.0);
    assert!(collapsed < before, "{before} classes before, {collapsed} after");
}

#[test]
fn revisiting_a_domain_does_not_forget() {
    let bench = Benchmark {
        target_per_class: 400,
        ..Benchmark::default()
    };
    let instances = bench.prepare_all(&[0, 1, 2, 3, 4]).unwrap();
    let stable = instances
        .iter()
        .filter(|inst| {
            let first = bench.target(inst, &bench.shift, 0).unwrap();
            let second = bench.target(inst, &bench.shift, 1).unwrap();
            let cfg = bench.tta_for(inst.seed);
            let streams = [&first, &second].map(|t| batch_stream(t, cfg.batch_size, cfg.augment, inst.seed).unwrap());
            let mut adapter = Adapter::new(inst.model.clone(), &inst.bank, cfg.clone()).unwrap();
            let report = run_ctta(&mut adapter, streams).unwrap();
            let (a, b) = (report.domains[0].summary.total_acc, report.domains[1].summary.total_acc);
            b >= a - 0.02
        })
        .count();
    assert!(stable >= 4, "{stable}/5 seeds");
}
