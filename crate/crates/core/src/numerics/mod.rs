//! Dense matrices, reverse-mode differentiation, and optimizers.

mod gradcheck;
pub mod matrix;
mod optim;
mod scalar;
pub mod tape;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use matrix::Matrix;
pub use optim::{adam_step, sgd_nesterov_step, AdamState, SgdMomentumState};
pub use scalar::Real;
pub use tape::{BatchStats, BnMode, Tape, Var};

/// Offset inside every `ln(x + ε)`.
pub const LOG_EPS: f64 = 1e-6;

/// Row-wise Shannon entropy `−Σ_c p_c ln(p_c + ε)` (nats).
pub fn row_entropy<T: Real>(probs: &Matrix<T>, eps: T) -> Vec<T> {
    probs
        .row_iter()
        .map(|row| -row.iter().map(|&p| p * (p + eps).ln()).sum::<T>())
        .collect()
}
