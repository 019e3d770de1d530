//! Finite-difference gradient checking.
//!
//! The oracle here is central differences: `(f(x+h) - f(x-h)) / 2h` evaluated
//! one coordinate at a time, never touching the reverse-mode machinery it
//! checks. Comparisons use a relative error with an absolute floor so that
//! near-zero gradients do not blow up the ratio.

/// Central-difference gradient of `f` at `x0`, perturbing one coordinate at a
/// time by `h`.
pub fn central_diff(x0: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let up = f(&x);
        x[i] = x0[i] - h;
        let down = f(&x);
        x[i] = x0[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error `|a-b| / max(|a|, |b|, 1)`; the floor of 1 keeps tiny
/// gradients from inflating the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest [`rel_err`] over two equally long gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Fraction of coordinates whose [`rel_err`] is within `tol`.
pub fn fraction_within(analytic: &[f64], numeric: &[f64], tol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    if analytic.is_empty() {
        return 1.0;
    }
    let ok = analytic
        .iter()
        .zip(numeric)
        .filter(|(&a, &n)| rel_err(a, n) <= tol)
        .count();
    ok as f64 / analytic.len() as f64
}
