use std::f64::consts::PI;

use pstarc::data::{batch_stream, make_shifted_domain, make_source_domain, AugmentConfig, Dataset, DomainSpec, Shift};
use pstarc::model::{train_source, Architecture, SourceModel, TrainConfig};
use pstarc::numerics::Matrix;
use proptest::prelude::*;

fn two_blobs(half_gap: f64, per_class: usize, seed: u64) -> DomainSpec {
    DomainSpec {
        dim: 2,
        classes: 2,
        means: Matrix::from_rows(vec![vec![half_gap, 0.0], vec![-half_gap, 0.0]]).unwrap(),
        class_sigma: 1.0,
        samples_per_class: per_class,
        seed,
    }
}

/// A single projection into the classifier: close to linear.
fn trained(ds: &Dataset<f64>, seed: u64) -> SourceModel<f64> {
    let arch = Architecture {
        hidden: vec![],
        feature_dim: 16,
        batch_norm: false,
    };
    let model = SourceModel::init(ds.dim(), ds.classes, &arch, seed).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    train_source(model, ds, &cfg).unwrap().0
}

#[test]
fn separated_blobs_are_learnable() {
    let ds: Dataset<f64> = make_source_domain(&two_blobs(3.0, 500, 1)).unwrap();
    let acc = trained(&ds, 1).accuracy(&ds).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn identical_means_leave_nothing_to_learn() {
    let spec = DomainSpec {
        dim: 8,
        classes: 4,
        means: Matrix::zeros(4, 8),
        class_sigma: 1.0,
        samples_per_class: 500,
        seed: 3,
    };
    let ds: Dataset<f64> = make_source_domain(&spec).unwrap();
    let acc = trained(&ds, 3).accuracy(&ds).unwrap();
    assert!((acc - 0.25).abs() <= 0.05, "train accuracy {acc}");
}

#[test]
fn identity_shift_matches_source_accuracy() {
    let spec = DomainSpec::random_means(8, 4, 3.0, 1.0, 300, 5);
    let ds: Dataset<f64> = make_source_domain(&spec).unwrap();
    let model = trained(&ds, 5);
    let test: Dataset<f64> = make_source_domain(&spec.with_seed(50)).unwrap();
    let target: Dataset<f64> = make_shifted_domain(&spec.with_seed(51), &Shift::identity(8)).unwrap();
    let (a, b) = (model.accuracy(&test).unwrap(), model.accuracy(&target).unwrap());
    assert!((a - b).abs() <= 0.02, "source test {a}, identity target {b}");
}

#[test]
fn rotation_hurts_but_does_not_destroy() {
    let spec = two_blobs(2.0, 2000, 7);
    let ds: Dataset<f64> = make_source_domain(&spec).unwrap();
    let model = trained(&ds, 7);
    let test = spec.with_seed(70);
    let clean: Dataset<f64> = make_shifted_domain(&test, &Shift::identity(2)).unwrap();
    let rotated: Dataset<f64> = make_shifted_domain(&test, &Shift::plane_rotation(2, 0, 1, PI / 6.0)).unwrap();
    let (clean, rotated) = (model.accuracy(&clean).unwrap(), model.accuracy(&rotated).unwrap());
    assert!(0.5 < rotated && rotated < clean, "rotated {rotated}, clean {clean}");
}

#[test]
fn swapped_means_fall_below_chance() {
    let spec = two_blobs(3.0, 1000, 9);
    let ds: Dataset<f64> = make_source_domain(&spec).unwrap();
    let model = trained(&ds, 9);
    // A half turn carries each class mean onto the other one.
    let swap = Shift::plane_rotation(2, 0, 1, PI);
    let target: Dataset<f64> = make_shifted_domain(&spec.with_seed(90), &swap).unwrap();
    let acc = model.accuracy(&target).unwrap();
    assert!(acc < 0.5, "accuracy {acc}");
}

#[test]
fn translation_only_moves_one_class_across() {
    let spec = two_blobs(3.0, 1000, 11);
    let ds: Dataset<f64> = make_source_domain(&spec).unwrap();
    let model = trained(&ds, 11);
    let shift = Shift::identity(2).with_translation(vec![-6.0, 0.0]);
    let target: Dataset<f64> = make_shifted_domain(&spec.with_seed(110), &shift).unwrap();
    let acc = model.accuracy(&target).unwrap();
    assert!(acc < 0.55, "accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_deterministic_and_balanced(classes in 1usize..6, per_class in 1usize..20, seed in any::<u64>()) {
        let spec = DomainSpec::random_means(4, classes, 3.0, 1.0, per_class, seed);
        let a: Dataset<f64> = make_source_domain(&spec).unwrap();
        let b: Dataset<f64> = make_source_domain(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        for c in 0..classes {
            prop_assert_eq!(a.y.iter().filter(|&&l| l == c).count(), per_class);
        }
    }

    #[test]
    fn stream_emits_every_index_once(n in 1usize..60, batch in 1usize..20, seed in any::<u64>()) {
        let spec = DomainSpec::random_means(3, 1, 1.0, 1.0, n, seed);
        let ds: Dataset<f64> = make_source_domain(&spec).unwrap();
        let aug = AugmentConfig { noise_sigma: 0.1, dropout: 0.2, seed };
        let order: Vec<usize> = batch_stream(&ds, batch, aug, seed)
            .unwrap()
            .flat_map(|b| b.indices().to_vec())
            .collect();
        let again: Vec<usize> = batch_stream(&ds, batch, aug, seed)
            .unwrap()
            .flat_map(|b| b.indices().to_vec())
            .collect();
        prop_assert_eq!(&order, &again);
        let mut sorted = order;
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }
}
