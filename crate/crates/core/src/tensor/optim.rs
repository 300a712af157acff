use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step_count: u64,
    states: Vec<AdamWState<T>>,
}

impl<T: Real> AdamW<T> {
    /// Zero-initialized moments for each parameter, in order.
    pub fn new(config: AdamWConfig, params: &[&Tensor<T>]) -> Self {
        let states =
            params.iter().map(|p| AdamWState { m: vec![T::zero(); p.len()], v: vec![T::zero(); p.len()] }).collect();
        Self { config, step_count: 0, states }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn states(&self) -> &[AdamWState<T>] {
        &self.states
    }

    /// Applies one update using each parameter's gradient buffer (absent ⇒ zero).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if params.len() != self.states.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.states.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&self.states) {
            if p.len() != s.m.len() || p.grad.as_ref().is_some_and(|g| g.len() != p.len()) {
                return Err(Error::Shape(format!("parameter {:?} vs moment buffers", p.shape())));
            }
        }
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let lr = T::lit(c.lr);
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let (bc1, bc2, eps) = (T::lit(bc1), T::lit(bc2), T::lit(c.eps));
        for (p, s) in params.iter_mut().zip(self.states.iter_mut()) {
            let grad = p.grad.take();
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                s.m[i] = b1 * s.m[i] + one_b1 * g;
                s.v[i] = b2 * s.v[i] + one_b2 * g * g;
                let m_hat = s.m[i] / bc1;
                let v_hat = s.v[i] / bc2;
                data[i] = data[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
