//! Central finite-difference utilities used to verify every analytic backward
//! pass in this crate. Kept in the library so integration tests can reuse it.

/// Numerical gradient of `f` at `params` by central differences with step `h`.
pub fn central_diff_grad(f: &dyn Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let down = f(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Max over entries of `|a - b| / max(|a|, |b|, 1)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
