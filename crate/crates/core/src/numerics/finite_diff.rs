//! Central finite-difference gradient oracle.

use crate::numerics::Tensor;

/// Central-difference gradient of a pure scalar function, step `eps` per
/// coordinate. The result tensor carries the gradient in its data buffer.
pub fn finite_diff_grad<F: FnMut(&Tensor) -> f64>(mut f: F, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")
}

/// Largest per-coordinate relative error with denominator max(1, |analytic|).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
