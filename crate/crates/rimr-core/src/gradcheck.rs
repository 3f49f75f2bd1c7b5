//! Central finite-difference gradient checking, used by tests to validate
//! every analytic backward pass at 64-bit precision.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x0`.
pub fn finite_difference<F>(f: &mut F, x0: &Tensor<f64>, step: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut grad = Tensor::zeros(x0.shape());
    let mut probe = x0.clone();
    for i in 0..x0.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let hi = f(&probe);
        probe.data_mut()[i] = original - step;
        let lo = f(&probe);
        probe.data_mut()[i] = original;
        grad.data_mut()[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Normwise relative error between an analytic and a reference gradient.
pub fn relative_error(analytic: &Tensor<f64>, reference: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), reference.shape(), "gradient shapes differ");
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = reference.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-10)
}

/// Default step for 64-bit central differences; error scales as step^2 while
/// round-off scales as eps/step, balanced near 1e-5 for O(1) values.
pub const FD_STEP: f64 = 1e-5;

/// Acceptance bound for analytic-vs-finite-difference comparisons.
pub const FD_REL_TOL: f64 = 1e-4;
