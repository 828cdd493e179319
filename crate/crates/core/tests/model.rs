use pstarc::data::{make_source_domain, Dataset, DomainSpec};
use pstarc::model::{train_source, Architecture, Classifier, Mode, SourceModel, TrainConfig};
use pstarc::numerics::Matrix;
use proptest::prelude::*;

fn blobs(seed: u64) -> DomainSpec {
    DomainSpec {
        dim: 2,
        classes: 2,
        means: Matrix::from_rows(vec![vec![3.0, 0.0], vec![-3.0, 0.0]]).unwrap(),
        class_sigma: 1.0,
        samples_per_class: 500,
        seed,
    }
}

fn train(ds: &Dataset<f64>, seed: u64, cfg: TrainConfig) -> (SourceModel<f64>, pstarc::model::TrainReport) {
    let model = SourceModel::init(ds.dim(), ds.classes, &Architecture::default(), seed).unwrap();
    train_source(model, ds, &TrainConfig { seed, ..cfg }).unwrap()
}

#[test]
fn separable_blobs_generalize() {
    let ds: Dataset<f64> = make_source_domain(&blobs(2)).unwrap();
    let (model, _) = train(&ds, 2, TrainConfig::default());
    let test: Dataset<f64> = make_source_domain(&blobs(20)).unwrap();
    let acc = model.accuracy(&test).unwrap();
    assert!(acc >= 0.99, "test accuracy {acc}");
}

#[test]
fn indistinguishable_classes_stay_at_chance() {
    let spec = DomainSpec {
        dim: 8,
        classes: 4,
        means: Matrix::zeros(4, 8),
        class_sigma: 1.0,
        samples_per_class: 500,
        seed: 4,
    };
    let ds: Dataset<f64> = make_source_domain(&spec).unwrap();
    let (model, _) = train(&ds, 4, TrainConfig::default());
    let test: Dataset<f64> = make_source_domain(&spec.with_seed(40)).unwrap();
    let acc = model.accuracy(&test).unwrap();
    assert!((acc - 0.25).abs() <= 0.05, "test accuracy {acc}");
}

#[test]
fn first_epoch_lowers_the_loss() {
    let spec = DomainSpec::random_means(8, 4, 3.0, 1.0, 100, 0);
    let improved = (0..5u64)
        .filter(|&seed| {
            let ds: Dataset<f64> = make_source_domain(&spec.with_seed(seed)).unwrap();
            let (_, report) = train(&ds, seed, TrainConfig { epochs: 1, ..TrainConfig::default() });
            report.epoch_losses[0] < report.initial_loss
        })
        .count();
    assert!(improved >= 4, "{improved}/5 seeds");
}

#[test]
fn training_leaves_data_generation_alone() {
    let spec = DomainSpec::random_means(4, 3, 3.0, 1.0, 50, 6);
    let before: Dataset<f64> = make_source_domain(&spec).unwrap();
    let _ = train(&before, 6, TrainConfig { epochs: 2, ..TrainConfig::default() });
    let after: Dataset<f64> = make_source_domain(&spec).unwrap();
    assert_eq!(before, after);
}

fn small_model(seed: u64) -> SourceModel<f64> {
    let arch = Architecture {
        hidden: vec![8],
        feature_dim: 4,
        batch_norm: true,
    };
    SourceModel::init(3, 5, &arch, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn direction_scale_does_not_change_predictions(
        seed in 0u64..1000,
        scales in prop::collection::vec(0.01f64..100.0, 5),
        x in prop::collection::vec(-3.0f64..3.0, 12),
    ) {
        let model = small_model(seed);
        let x = Matrix::new(4, 3, x).unwrap();
        let (feat, probs) = model.forward(&x, Mode::Eval).unwrap();
        let mut v = model.classifier.v.clone();
        for (c, s) in scales.iter().enumerate() {
            v.row_mut(c).iter_mut().for_each(|e| *e *= s);
        }
        let scaled = Classifier::new(v, model.classifier.g.clone()).unwrap();
        let other = scaled.probs(&feat).unwrap();
        for (a, b) in probs.data().iter().zip(other.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300) + 1e-15);
        }
        prop_assert_eq!(probs.argmax_rows(), other.argmax_rows());
    }

    #[test]
    fn eval_forward_is_pure(seed in 0u64..1000, x in prop::collection::vec(-3.0f64..3.0, 6)) {
        let model = small_model(seed);
        let x = Matrix::new(2, 3, x).unwrap();
        let first = model.forward(&x, Mode::Eval).unwrap();
        prop_assert_eq!(&first, &model.forward(&x, Mode::Eval).unwrap());
        for s in first.1.row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn single_precision_trains_too() {
    let ds: Dataset<f32> = make_source_domain(&blobs(8)).unwrap();
    let model: pstarc::SourceModel32 = SourceModel::init(2, 2, &Architecture::default(), 8).unwrap();
    let (model, _) = train_source(model, &ds, &TrainConfig { seed: 8, ..TrainConfig::default() }).unwrap();
    let test: Dataset<f32> = make_source_domain(&blobs(80)).unwrap();
    let acc = model.accuracy(&test).unwrap();
    assert!(acc >= 0.99, "test accuracy {acc}");
}
