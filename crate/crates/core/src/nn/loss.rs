//! Mean squared error.

use super::{shape_err, Result};

/// `mean((pred - target)^2)` and its gradient `2 (pred - target) / K`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err(format!("prediction has {} values, target {}", pred.len(), target.len())));
    }
    let k = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / k;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / k).collect();
    Ok((loss, grad))
}
