use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;

/// First and second moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update:
/// `p ← p − lr · m̂ / (√v̂ + ε)`.
pub fn step_adam(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.len() || grads.len() != state.len() {
        return Err(Error::OptimizerState(format!(
            "adam state holds {} values, got {} params and {} grads",
            state.len(),
            params.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}

/// Bop hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BopConfig {
    /// Momentum adaptivity γ ∈ (0, 1].
    pub gamma: f64,
    /// Flip threshold τ > 0.
    pub tau: f64,
}

impl Default for BopConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-4,
            tau: 1e-8,
        }
    }
}

impl BopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("bop gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("bop tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Gradient momentum for one binary weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BopState {
    m: Vec<f64>,
    cfg: BopConfig,
}

impl BopState {
    pub fn new(len: usize, cfg: BopConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            m: vec![0.0; len],
            cfg,
        })
    }

    pub fn momentum(&self) -> &[f64] {
        &self.m
    }

    pub fn config(&self) -> BopConfig {
        self.cfg
    }
}

/// One Bop update on ±1 weights: `m ← (1−γ)m + γg`, then flip `w` where
/// `|m| > τ` and `m` has the sign of `w`. Returns the number of flips.
pub fn step_bop(weights: &mut [f64], grads: &[f64], state: &mut BopState) -> Result<usize> {
    if weights.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::OptimizerState(format!(
            "bop state holds {} values, got {} weights and {} grads",
            state.m.len(),
            weights.len(),
            grads.len()
        )));
    }
    if let Some(i) = weights.iter().position(|&w| w != 1.0 && w != -1.0) {
        return Err(Error::OptimizerState(format!("weight {i} is {}, not ±1", weights[i])));
    }
    let BopConfig { gamma, tau } = state.cfg;
    let mut flips = 0;
    for ((w, &g), m) in weights.iter_mut().zip(grads).zip(state.m.iter_mut()) {
        *m = (1.0 - gamma) * *m + gamma * g;
        if m.abs() > tau && (*m > 0.0) == (*w > 0.0) {
            *w = -*w;
            flips += 1;
        }
    }
    Ok(flips)
}
