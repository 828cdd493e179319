use super::{Matrix, Real};

/// Central-difference gradient `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`, entry by entry.
pub fn finite_diff_grad<T: Real>(mut f: impl FnMut(&Matrix<T>) -> T, x: &Matrix<T>, h: T) -> Matrix<T> {
    assert!(h > T::zero(), "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (h + h);
    }
    out
}

/// Largest entrywise `|a−b| / max(|a|, |b|, floor)`.
pub fn max_relative_error<T: Real>(a: &Matrix<T>, b: &Matrix<T>, floor: T) -> T {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(T::zero(), T::max)
}
