//! Central-difference gradient estimates, used as the independent oracle for
//! the tape's analytic gradients.

use crate::tensor::Tensor;

/// Estimates `∂f/∂x` coordinate by coordinate as
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape")
}

/// Magnitude below which relative error is measured against this floor
/// instead of the entries themselves.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Largest entrywise `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative error of mismatched shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_grad(
            |t| t.data().iter().map(|v| v * v).sum(),
            &Tensor::vector(vec![3.0]),
            1e-5,
        );
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn cubic_matches_analytic() {
        let g = finite_diff_grad(
            |t| t.data().iter().map(|v| v * v * v).sum(),
            &Tensor::vector(vec![2.0]),
            1e-4,
        );
        assert!((g.data()[0] - 12.0).abs() < 1e-6);
    }
}
