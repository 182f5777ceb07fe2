//! Central finite-difference gradient oracle.
//!
//! The numeric gradient here is the independent reference every analytic
//! backward pass is checked against; it never calls into the backward code.

use crate::error::{Result, SpclError};

/// Central differences (f(θ+εe) − f(θ−εe)) / 2ε per coordinate.
pub fn finite_difference_gradient<F>(f: &F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(SpclError::Argument("finite differences need eps > 0".into()));
    }
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = f(&work)?;
        work[i] = orig - eps;
        let minus = f(&work)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(SpclError::Numeric(format!(
                "loss non-finite while probing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Relative error of one pair, with an absolute fallback when both sides vanish.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-10 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Worst relative error across two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
