//! Central finite differences against analytic gradients.

use crate::nn::params::ParamVector;

/// Relative error `|a − n| / max(|a|, |n|, 1e-5)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Numeric gradient of `loss` at `p` by central differences with step `h`.
pub fn numeric_gradient(
    p: &ParamVector<f64>,
    h: f64,
    mut loss: impl FnMut(&ParamVector<f64>) -> f64,
) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.len())
        .map(|k| {
            let orig = q.values()[k];
            q.values_mut()[k] = orig + h;
            let up = loss(&q);
            q.values_mut()[k] = orig - h;
            let down = loss(&q);
            q.values_mut()[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
