//! Loss primitives with their derivatives.

use crate::error::{Error, Result};

/// Transition point between the quadratic and linear pieces of SmoothL1.
pub const SMOOTH_L1_BETA: f64 = 1.0;

pub fn smooth_l1_elem(d: f64) -> f64 {
    if d.abs() < SMOOTH_L1_BETA {
        0.5 * d * d / SMOOTH_L1_BETA
    } else {
        d.abs() - 0.5 * SMOOTH_L1_BETA
    }
}

pub fn smooth_l1_elem_grad(d: f64) -> f64 {
    if d.abs() < SMOOTH_L1_BETA {
        d / SMOOTH_L1_BETA
    } else {
        d.signum()
    }
}

/// Mean SmoothL1 over elements of `x - y`.
pub fn smooth_l1(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "smooth_l1 operands have {} and {} elements",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = x.iter().zip(y).map(|(a, b)| smooth_l1_elem(a - b)).sum();
    Ok(total / x.len() as f64)
}

/// Mean SmoothL1 and its gradient with respect to `x` (the gradient with
/// respect to `y` is the negation).
pub fn smooth_l1_with_grad(x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = smooth_l1(x, y)?;
    let n = x.len().max(1) as f64;
    let grad = x
        .iter()
        .zip(y)
        .map(|(a, b)| smooth_l1_elem_grad(a - b) / n)
        .collect();
    Ok((loss, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit; returns `(loss, dloss/dz)`.
pub fn bce_with_logits(z: f64, target: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - target)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against class `target`;
/// returns `(loss, dloss/dlogits)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|&v| (v - log_z).exp()).collect();
    grad[target] -= 1.0;
    (loss, grad)
}
