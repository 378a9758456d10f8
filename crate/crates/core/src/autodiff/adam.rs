use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn for_params(params: &[Tensor], cfg: AdamConfig) -> Vec<Self> {
        params.iter().map(|p| Self::new(p.len(), cfg)).collect()
    }
}

/// One bias-corrected Adam update per parameter, then zeroes the gradients.
/// All gradients are checked before anything is modified.
pub fn adam_step(params: &[Tensor], states: &mut [AdamState]) -> Result<()> {
    if params.len() != states.len() {
        return Err(TensorError::StateCountMismatch {
            params: params.len(),
            states: states.len(),
        });
    }
    for (i, (p, s)) in params.iter().zip(states.iter()).enumerate() {
        if p.grad().is_none() {
            return Err(TensorError::MissingGradient(i));
        }
        if s.m.len() != p.len() || s.v.len() != p.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![s.m.len()],
            });
        }
    }
    for (p, s) in params.iter().zip(states.iter_mut()) {
        let grad = p.grad().expect("checked above");
        s.step_count += 1;
        let t = s.step_count as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        p.update_data(|theta| {
            for (i, g) in grad.iter().enumerate() {
                s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
                s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
                let m_hat = s.m[i] / bc1;
                let v_hat = s.v[i] / bc2;
                theta[i] -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
            }
        });
        p.zero_grad();
    }
    Ok(())
}
