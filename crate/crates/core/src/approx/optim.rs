use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::math;

use super::params::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        OptimizerState { config, m: alloc::vec![0.0; n_params], v: alloc::vec![0.0; n_params], step: 0 }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &[f64]) -> Result<()> {
        let c = self.config;
        contract!(c.lr > 0.0, "learning rate must be positive");
        contract!(
            grads.len() == params.values.len() && self.m.len() == grads.len(),
            "gradient length {} vs {} parameters",
            grads.len(),
            params.values.len()
        );
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = params
                .tensors
                .iter()
                .find(|t| i >= t.offset && i < t.offset + t.numel())
                .map(|t| t.name.clone())
                .unwrap_or_default();
            return Err(Error::Training(alloc::format!(
                "non-finite gradient {} at index {i} ({name}) on step {}",
                grads[i],
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - math::powf(c.beta1, t as f64);
        let bc2 = 1.0 - math::powf(c.beta2, t as f64);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (((p, g), m), v) in params.values.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *p *= decay;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.lr * m_hat / (math::sqrt(v_hat) + c.eps);
        }
        Ok(())
    }
}

/// Learning-rate multiplier over a fixed number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Half cosine from 1 down to 0 at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total <= 1 => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + math::cos(core::f64::consts::PI * step as f64 / total as f64)),
        }
    }
}

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.iter().map(|g| g * g).sum());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}
