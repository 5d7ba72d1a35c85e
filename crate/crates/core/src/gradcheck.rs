//! Central finite-difference gradient oracle.
//!
//! This is the independent reference every analytic gradient in the crate is
//! checked against. It only ever calls the forward evaluation closure, so it
//! cannot share a bug with the tape's reverse pass.

/// Central-difference gradient of `f` with respect to each parameter block.
///
/// `f` must re-evaluate the full forward pass from the given parameter values;
/// each scalar entry is perturbed by `±step`.
pub fn central_diff<F>(f: &F, params: &[Vec<f64>], step: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let mut plus = params.to_vec();
            plus[p][i] += step;
            let fp = f(&plus);
            let mut minus = params.to_vec();
            minus[p][i] -= step;
            let fm = f(&minus);
            g[i] = (fp - fm) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative discrepancy between analytic and numeric gradients.
///
/// The denominator is floored at 1e-3 so near-zero gradients are compared on
/// an absolute scale instead of amplifying finite-difference noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
