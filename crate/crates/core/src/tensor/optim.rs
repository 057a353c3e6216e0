use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm cap applied across all gradients before the moment update.
    pub grad_clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip_norm: Some(0.25) }
    }
}

impl AdamWConfig {
    /// Plain Adam at `lr`: no weight decay, no clipping.
    pub fn adam(lr: f64) -> Self {
        Self { lr, weight_decay: 0.0, grad_clip_norm: None, ..Self::default() }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads`. Returns the pre-clip global norm.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch { left: vec![params.len()], right: vec![grads.len()] });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::ShapeMismatch { left: p.shape().to_vec(), right: vec![g.len()] });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::InvalidArgument("parameter layout changed between steps".into()));
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let clip = match self.config.grad_clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k] * clip;
                *w -= c.lr * c.weight_decay * *w;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(norm)
    }

    /// Updates every tensor in `store` from its accumulated `grad`
    /// (missing gradients count as zero), then clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        let grads: Vec<Vec<f64>> = store
            .tensors_mut()
            .iter_mut()
            .map(|t| t.grad.take().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        self.update(store.tensors_mut(), &grads)
    }
}
