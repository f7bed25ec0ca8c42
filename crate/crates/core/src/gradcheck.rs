//! Central finite differences for checking tape gradients.

use crate::tensor::Matrix;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `x` by central differences.
pub fn numerical_gradient(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let plus = f(&probe);
        probe.as_mut_slice()[i] = orig - step;
        let minus = f(&probe);
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest elementwise relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps entries that are zero up to rounding from dominating;
/// central differences at step 1e-5 carry absolute noise near 1e-10.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let g = numerical_gradient(&x, DEFAULT_STEP, |m| m.as_slice().iter().map(|v| v * v).sum());
        let want = Matrix::from_rows(&[[2.0, -4.0]]).unwrap();
        assert!(max_relative_error(&want, &g, 1e-6) < 1e-8);
    }
}
