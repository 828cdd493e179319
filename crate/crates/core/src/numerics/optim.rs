//! Adam and SGD with (Nesterov) momentum, one state per parameter tensor.

use serde::{Deserialize, Serialize};

use super::{Matrix, Real};
use crate::error::{Error, Result};

fn check_shapes<T: Real>(op: &'static str, param: &Matrix<T>, grad: &Matrix<T>, state: &Matrix<T>) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.shape() {
        return Err(Error::dim(
            op,
            format!(
                "param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                state.shape()
            ),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamState<T: Real> {
    pub m: Matrix<T>,
    pub v: Matrix<T>,
    pub t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    /// Zero moments with the usual defaults `β1 = 0.9, β2 = 0.999, eps = 1e-8`.
    pub fn new(rows: usize, cols: usize, lr: T) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }
}

/// One bias-corrected Adam update:
/// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`, `p ← p − lr·m̂/(√v̂ + eps)`.
pub fn adam_step<T: Real>(param: &mut Matrix<T>, grad: &Matrix<T>, state: &mut AdamState<T>) -> Result<()> {
    check_shapes("adam_step", param, grad, &state.m)?;
    state.t += 1;
    let t = state.t as i32;
    let one = T::one();
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SgdMomentumState<T: Real> {
    pub buf: Matrix<T>,
    pub lr: T,
    pub momentum: T,
    pub nesterov: bool,
}

impl<T: Real> SgdMomentumState<T> {
    pub fn new(rows: usize, cols: usize, lr: T, momentum: T, nesterov: bool) -> Self {
        Self {
            buf: Matrix::zeros(rows, cols),
            lr,
            momentum,
            nesterov,
        }
    }
}

/// SGD with momentum, no dampening, no weight decay.
///
/// `buf ← μ·buf + g`, then `p ← p − lr·(g + μ·buf)` when Nesterov, else
/// `p ← p − lr·buf`. The buffer starts at zero, so the first Nesterov step
/// moves by `lr·(1+μ)·g`.
pub fn sgd_nesterov_step<T: Real>(
    param: &mut Matrix<T>,
    grad: &Matrix<T>,
    state: &mut SgdMomentumState<T>,
) -> Result<()> {
    check_shapes("sgd_nesterov_step", param, grad, &state.buf)?;
    let (lr, mu, nesterov) = (state.lr, state.momentum, state.nesterov);
    for ((p, &g), b) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.buf.data_mut())
    {
        *b = mu * *b + g;
        let step = if nesterov { g + mu * *b } else { *b };
        *p = *p - lr * step;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut p = Matrix::row_vector(vec![1.0f64, -2.0, 0.5]);
        let g = Matrix::row_vector(vec![3.0, -0.7, 100.0]);
        let mut st = AdamState::new(1, 3, 0.01);
        adam_step(&mut p, &g, &mut st).unwrap();
        let expected = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Matrix::row_vector(vec![0.3f64, -0.4]);
        let before = p.clone();
        let mut st = AdamState::new(1, 2, 0.01);
        for _ in 0..5 {
            adam_step(&mut p, &Matrix::zeros(1, 2), &mut st).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut x = Matrix::scalar(1.0f64);
        let mut st = AdamState::new(1, 1, 0.01);
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let g = x.scale(2.0);
            adam_step(&mut x, &g, &mut st).unwrap();
            let now = x.data()[0].abs();
            assert!(now < prev);
            prev = now;
        }
        assert!(prev < 1.0);
        assert!(st.v.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn nesterov_first_step_and_plain_sgd() {
        let mut p = Matrix::scalar(0.0f64);
        let mut st = SgdMomentumState::new(1, 1, 0.1, 0.9, true);
        sgd_nesterov_step(&mut p, &Matrix::scalar(2.0), &mut st).unwrap();
        assert!((p.data()[0] + 0.1 * 1.9 * 2.0).abs() < 1e-15);

        let mut q = Matrix::scalar(1.0f64);
        let mut st = SgdMomentumState::new(1, 1, 0.5, 0.0, true);
        sgd_nesterov_step(&mut q, &Matrix::scalar(3.0), &mut st).unwrap();
        assert_eq!(q.data()[0], 1.0 - 0.5 * 3.0);
    }

    #[test]
    fn nesterov_two_unit_steps_displace_four_point_six_one() {
        // Unrolled by hand: step 1 buf=1 moves 1+0.9·1 = 1.9;
        // step 2 buf=1.9 moves 1+0.9·1.9 = 2.71.
        let mut p = Matrix::scalar(0.0f64);
        let mut st = SgdMomentumState::new(1, 1, 1.0, 0.9, true);
        for _ in 0..2 {
            sgd_nesterov_step(&mut p, &Matrix::scalar(1.0), &mut st).unwrap();
        }
        assert!((p.data()[0] + 4.61).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = Matrix::<f64>::zeros(2, 2);
        let mut st = AdamState::new(2, 2, 0.1);
        assert!(adam_step(&mut p, &Matrix::zeros(1, 2), &mut st).is_err());
        let mut st = SgdMomentumState::new(1, 1, 0.1, 0.9, true);
        assert!(sgd_nesterov_step(&mut p, &Matrix::zeros(2, 2), &mut st).is_err());
    }
}
