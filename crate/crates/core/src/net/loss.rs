//! Classification losses with their gradients in the logits.

use crate::error::{Error, Result};

/// Mean negative log-likelihood over the batch with log-sum-exp
/// stabilization. Returns the loss and `(softmax - onehot) / m`.
pub fn softmax_cross_entropy(
    logits: &[f64],
    m: usize,
    classes: usize,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != m * classes || labels.len() != m || m == 0 {
        return Err(Error::Shape(format!(
            "loss shapes: {} logits, {} labels, batch {m}, classes {classes}",
            logits.len(),
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; m * classes];
    for i in 0..m {
        let label = labels[i];
        if label >= classes {
            return Err(Error::Domain(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        loss += lse - row[label];
        let grow = &mut grad[i * classes..(i + 1) * classes];
        for (g, &v) in grow.iter_mut().zip(row) {
            *g = (v - lse).exp() / m as f64;
        }
        grow[label] -= 1.0 / m as f64;
    }
    loss /= m as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok((loss, grad))
}

/// `0.5 * sum (logits - targets)^2` with gradient `logits - targets`.
/// Quadratic in the logits, so finite differences are exact up to roundoff;
/// used by the gradient-check harness.
pub fn sum_squares(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Shape("sum_squares shape mismatch".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        let d = logits[i] - targets[i];
        loss += 0.5 * d * d;
        grad[i] = d;
    }
    Ok((loss, grad))
}
