use pstarc::numerics::{
    adam_step, finite_diff_grad, max_relative_error, row_entropy, sgd_nesterov_step, AdamState, Matrix, SgdMomentumState,
    Tape,
};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn sized(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let a = Matrix::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
    let b = Matrix::from_fn(4, 2, |r, c| ((r * 2 + c) as f64 * 0.91).cos());
    let mut t = Tape::new();
    let (av, bv) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let m = t.matmul(av, bv).unwrap();
    let s = t.sum(m).unwrap();
    t.backward(s).unwrap();
    let fd_a = finite_diff_grad(|p| p.matmul(&b).unwrap().sum(), &a, 1e-5);
    let fd_b = finite_diff_grad(|p| a.matmul(p).unwrap().sum(), &b, 1e-5);
    assert!(max_relative_error(t.grad(av), &fd_a, 1e-8) < 1e-6);
    assert!(max_relative_error(t.grad(bv), &fd_b, 1e-8) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in sized(6, 12)) {
        let p = x.scale(10.0).row_softmax();
        for s in p.row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_lies_between_zero_and_log_c(x in sized(6, 12)) {
        let c = x.cols() as f64;
        for e in row_entropy(&x.scale(5.0).row_softmax(), 1e-6) {
            prop_assert!(e >= -1e-6 && e <= c.ln() + 1e-9, "entropy {e} for C={c}");
        }
    }

    #[test]
    fn second_backward_doubles_gradients(a in matrix(3, 4), b in matrix(4, 2)) {
        let mut t = Tape::new();
        let (av, bv) = (t.leaf(a), t.leaf(b));
        let m = t.matmul(av, bv).unwrap();
        let h = t.tanh(m).unwrap();
        let p = t.softmax(h).unwrap();
        let l = t.log(p, 1e-6).unwrap();
        let s = t.mean(l).unwrap();
        t.backward(s).unwrap();
        let once = (t.grad(av).clone(), t.grad(bv).clone());
        t.backward(s).unwrap();
        prop_assert_eq!(t.grad(av), &once.0.scale(2.0));
        prop_assert_eq!(t.grad(bv), &once.1.scale(2.0));
    }

    #[test]
    fn smooth_ops_match_finite_differences(x in matrix(3, 4), w in matrix(3, 4)) {
        let f = |m: &Matrix<f64>| m.map(f64::tanh).row_softmax().hadamard(&w).unwrap().sum();
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.constant(w.clone());
        let h = t.tanh(xv).unwrap();
        let p = t.softmax(h).unwrap();
        let pw = t.mul(p, wv).unwrap();
        let s = t.sum(pw).unwrap();
        t.backward(s).unwrap();
        let fd = finite_diff_grad(f, &x, 1e-5);
        prop_assert!(max_relative_error(t.grad(xv), &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn optimizer_steps_are_deterministic(p in matrix(2, 3), g in matrix(2, 3), steps in 1usize..5) {
        let run_sgd = || {
            let (mut q, mut st) = (p.clone(), SgdMomentumState::new(2, 3, 0.1, 0.9, true));
            for _ in 0..steps {
                sgd_nesterov_step(&mut q, &g, &mut st).unwrap();
            }
            (q, st)
        };
        let run_adam = || {
            let (mut q, mut st) = (p.clone(), AdamState::new(2, 3, 0.01));
            for _ in 0..steps {
                adam_step(&mut q, &g, &mut st).unwrap();
            }
            (q, st)
        };
        prop_assert_eq!(run_sgd(), run_sgd());
        prop_assert_eq!(run_adam(), run_adam());
        let (_, st) = run_adam();
        prop_assert!(st.v.data().iter().all(|&v| v >= 0.0));
    }
}
