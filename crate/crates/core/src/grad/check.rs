//! Central finite-difference gradient verification.

use super::tensor::Tensor;
use crate::Result;

/// Numerical gradient of `eval` at `at`, one central difference per element.
pub fn finite_difference(
    eval: &mut dyn FnMut(&Tensor) -> Result<f64>,
    at: &Tensor,
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; at.numel()];
    let mut probe = at.clone();
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst elementwise relative error between two gradients; the denominator
/// is floored so near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
