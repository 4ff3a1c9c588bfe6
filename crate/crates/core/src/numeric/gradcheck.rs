use crate::error::{config_err, input_err, Result};
use crate::scalar::Scalar;

/// Compares an analytic gradient against central differences.
///
/// Returns the largest per-coordinate relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator. `loss` must be
/// deterministic: any random draw (e.g. reparameterization noise) has to be
/// held fixed inside the closure.
pub fn finite_diff_check<T, F, G>(mut loss: F, grad: G, params: &[T], eps: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
    G: FnOnce(&[T]) -> Vec<T>,
{
    if !(eps > T::zero()) {
        return config_err("finite-difference step must be positive");
    }
    let analytic = grad(params);
    if analytic.len() != params.len() {
        return config_err("gradient length differs from parameter count");
    }
    let floor = T::lit(1e-8);
    let two = T::lit(2.0);
    let mut probe = params.to_vec();
    let mut worst = T::zero();
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = loss(&probe);
        probe[i] = orig - eps;
        let minus = loss(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return input_err(format!("loss is non-finite near coordinate {i}"));
        }
        let numeric = (plus - minus) / (two * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
