//! Central finite differences, used as a gradient oracle.

use crate::error::{Error, Result};

/// `(f(θ+ε e_i) − f(θ−ε e_i)) / 2ε` for every coordinate.
pub fn finite_difference_grad<F>(mut loss_fn: F, params: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let x = theta[i];
        theta[i] = x + epsilon;
        let fp = loss_fn(&theta);
        theta[i] = x - epsilon;
        let fm = loss_fn(&theta);
        theta[i] = x;
        out.push((fp - fm) / (2.0 * epsilon));
    }
    Ok(out)
}

/// Largest `|a−b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
