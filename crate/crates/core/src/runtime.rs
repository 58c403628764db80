//! Per-sample adaptive inference: run exit by exit and stop at the first exit
//! whose output is confident enough.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MelFeature;
use crate::net::{softmax, ExitOutput, Model};

/// Shannon entropy in nats, `−Σ p ln p` with `0 ln 0 = 0`, clamped to
/// `[0, ln C]`.
pub fn entropy(p: &[f64]) -> Result<f64> {
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
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    Ok(h.clamp(0.0, (p.len() as f64).ln()))
}

/// When a sample may leave at an exit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DecisionRule {
    /// Exit when the entropy (nats) is strictly below `delta`.
    Entropy { delta: f64 },
    /// Exit when the maximum of `softmax(logits / temperature)` is at least
    /// `threshold`.
    Confidence { threshold: f64, temperature: f64 },
}

impl DecisionRule {
    pub fn entropy(delta: f64) -> Result<Self> {
        let r = DecisionRule::Entropy { delta };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DecisionRule::Entropy { delta } => {
                if delta.is_nan() || delta < 0.0 {
                    return Err(Error::Rule(format!("entropy threshold must be >= 0, got {delta}")));
                }
            }
            DecisionRule::Confidence {
                threshold,
                temperature,
            } => {
                if !(threshold > 0.0 && threshold <= 1.0) {
                    return Err(Error::Rule(format!(
                        "confidence threshold must lie in (0, 1], got {threshold}"
                    )));
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::Rule(format!("temperature must be positive, got {temperature}")));
                }
            }
        }
        Ok(())
    }

    /// Confidence value of an exit output under this rule (entropy or μ).
    pub fn score(&self, out: &ExitOutput) -> Result<f64> {
        match *self {
            DecisionRule::Entropy { .. } => entropy(&out.probs),
            DecisionRule::Confidence { temperature, .. } => Ok(softmax(&out.logits, temperature)
                .into_iter()
                .fold(0.0, f64::max)),
        }
    }

    /// Whether `score` satisfies the rule.
    pub fn accepts(&self, score: f64) -> bool {
        match *self {
            DecisionRule::Entropy { delta } => score < delta,
            DecisionRule::Confidence { threshold, .. } => score >= threshold,
        }
    }
}

/// Outcome of one adaptive inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    /// 1-based exit the sample left at.
    pub exit_index: usize,
    /// Rule score at that exit.
    pub confidence: f64,
    pub prediction: usize,
    /// Rule score of every exit evaluated, in order.
    pub trail: Vec<f64>,
    /// MACs executed.
    pub macs: u64,
    /// Wall time of the network pass in milliseconds.
    pub wall_ms: f64,
}

/// Run exits in order and return at the first one the rule accepts, or at
/// the last exit. Later blocks are never executed.
pub fn infer_early_exit(model: &Model, feature: &MelFeature, rule: &DecisionRule) -> Result<ExitRecord> {
    rule.validate()?;
    let start = Instant::now();
    let exits = model.num_exits();
    let mut trail = Vec::with_capacity(exits);
    let (mut out, mut state) = model.forward_prefix(feature, 1)?;
    let mut e = 1;
    loop {
        let score = rule.score(&out)?;
        trail.push(score);
        if e == exits || rule.accepts(score) {
            return Ok(ExitRecord {
                exit_index: e,
                confidence: score,
                prediction: crate::train::argmax(&out.probs),
                trail,
                macs: state.macs(),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        e += 1;
        (out, state) = model.resume_prefix(state, e)?;
    }
}

/// Prediction of a fixed exit, as a single-exit model would give it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedExit {
    pub exit_index: usize,
    pub prediction: usize,
    /// Maximum softmax probability.
    pub confidence: f64,
    pub entropy: f64,
    pub macs: u64,
}

/// Unconditional exit at `exit_index` (1-based). Costs the same prefix as an
/// early exit there: earlier heads are evaluated too.
pub fn infer_fixed_exit(model: &Model, feature: &MelFeature, exit_index: usize) -> Result<FixedExit> {
    let (out, state) = model.forward_prefix(feature, exit_index)?;
    Ok(FixedExit {
        exit_index,
        prediction: crate::train::argmax(&out.probs),
        confidence: out.probs.iter().cloned().fold(0.0, f64::max),
        entropy: entropy(&out.probs)?,
        macs: state.macs(),
    })
}
