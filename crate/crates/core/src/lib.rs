//! Pseudo-source guided target clustering for fully test-time adaptation.
//!
//! A frozen source classifier is used to synthesize a small bank of
//! confident, class-balanced pseudo-source features. A feature extractor is
//! then adapted online, one optimizer step per unlabeled test batch, by
//! attracting confident samples to class-matched bank neighbours while
//! dispersing the predictions within each batch.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which the CLI and experiment runners use.

pub mod bank;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tta;

pub use error::{Error, Result};
pub use numerics::Real;

pub type Matrix = numerics::Matrix<f64>;
pub type Tape = numerics::Tape<f64>;
pub type Dataset = data::Dataset<f64>;
pub type Batch = data::Batch<f64>;
pub type SourceModel = model::SourceModel<f64>;
pub type Classifier = model::Classifier<f64>;
pub type FeatureBank = bank::FeatureBank<f64>;
pub type Adapter<'b> = tta::Adapter<'b, f64>;

pub type Matrix32 = numerics::Matrix<f32>;
pub type SourceModel32 = model::SourceModel<f32>;
pub type FeatureBank32 = bank::FeatureBank<f32>;
