//! Central finite-difference gradient oracle.
//!
//! Independent of the tape: it only needs a scalar function of a flat
//! parameter vector. Used by tests to check every backward rule and the
//! full transformer gradient.

/// Central-difference gradient of `f` at `x` with the given step.
pub fn central_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest relative error between an analytic gradient and the oracle,
/// with a small absolute floor so near-zero entries compare sanely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
