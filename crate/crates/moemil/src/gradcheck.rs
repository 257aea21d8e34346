//! Finite-difference gradient oracle.
//!
//! Testing utility: estimates gradients by central differences from pure
//! forward evaluations, independent of the tape's backward pass. Tests
//! compare analytic gradients against this oracle in f64.

/// Relative error metric used throughout the gradient checks:
/// `|a - b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Central finite differences of `f` at `theta` with step `h`:
/// `(f(theta + h e_i) - f(theta - h e_i)) / 2h` per coordinate.
pub fn finite_diff<F>(mut f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest relative error between an analytic gradient and the
/// finite-difference estimate.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Default finite-difference step for f64 checks.
pub const FD_STEP: f64 = 1e-6;
