//! Adaptive-moment optimizer with decoupled weight decay, and global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; `0` gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates and step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Result<Self> {
        ensure!(config.learning_rate > 0.0, "learning rate must be positive");
        ensure!(
            (0.0..1.0).contains(&config.beta1) && (0.0..1.0).contains(&config.beta2),
            "betas must lie in [0, 1)"
        );
        ensure!(config.eps > 0.0 && config.weight_decay >= 0.0, "eps must be positive and weight decay non-negative");
        Ok(Self {
            config,
            state: AdamState::default(),
        })
    }

    /// One update of every parameter that received a gradient.
    /// `scale` multiplies all gradients first (used for clipping).
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, scale: f64) -> Result<()> {
        let c = self.config;
        self.state.t += 1;
        let t = self.state.t as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if scale == 1.0 { g.detach() } else { (g.detach() * scale)? };
            let m = match self.state.m.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.state.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let p = var.as_tensor().detach();
            let p = if c.weight_decay > 0.0 {
                (p * (1.0 - c.learning_rate * c.weight_decay))?
            } else {
                p
            };
            var.set(&(p - (update * c.learning_rate)?)?.detach())?;
            self.state.m.insert(name.clone(), m.detach());
            self.state.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }
}

/// L2 norm of all gradients of `params`.
pub fn global_grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for (_, var) in params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Gradient multiplier that caps the global norm at `max_norm`.
pub fn clip_scale(norm: f64, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(max) if norm > max => max / (norm + 1e-6),
        _ => 1.0,
    }
}
