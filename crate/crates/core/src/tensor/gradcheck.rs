//! Finite-difference oracles for the backward pass.

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + eps;
        let hi = f(&buf);
        buf[i] = orig - eps;
        let lo = f(&buf);
        buf[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// Worst relative error between an analytic gradient and the central
/// difference: max_i |a_i - n_i| / max(1, |a_i|). The denominator floor keeps
/// near-zero gradients from blowing the ratio up on pure rounding noise.
pub fn grad_check<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let numeric = numeric_grad(f, x, eps);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
