use crate::error::{Error, Result};
use crate::net::ExitStack;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `−ln(max(pred[label], 1e-12))`.
pub fn cross_entropy(pred: &[f64], label: usize) -> Result<f64> {
    if label >= pred.len() {
        return Err(Error::Label {
            label,
            classes: pred.len(),
        });
    }
    check_distribution(pred)?;
    Ok(-pred[label].max(PROB_FLOOR).ln())
}

/// `Σ_j weights[j] · cross_entropy(exit j, label)` for one sample.
pub fn joint_loss(stack: &ExitStack, label: usize, weights: &[f64]) -> Result<f64> {
    if weights.len() != stack.len() {
        return Err(Error::LengthMismatch {
            expected: stack.len(),
            found: weights.len(),
        });
    }
    let mut total = 0.0;
    for (exit, &w) in stack.exits.iter().zip(weights) {
        total += w * cross_entropy(&exit.probs, label)?;
    }
    Ok(total)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Distribution("empty distribution".into()));
    }
    if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Distribution(format!("entry {i} is {}", p[i])));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Distribution(format!("sums to {sum}")));
    }
    Ok(())
}
