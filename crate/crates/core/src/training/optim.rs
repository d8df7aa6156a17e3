use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

/// Linear warmup to `base_lr`, then inverse-square-root decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
}

impl Schedule {
    /// Rate for the 1-based step `step`.
    pub fn rate(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        let w = self.warmup_steps as f64;
        self.base_lr * (s / w).min((w / s).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
        }
    }
}

/// Adaptive-moment optimizer state: one pair of moment buffers per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub first: ParamStore,
    pub second: ParamStore,
}

impl OptimizerState {
    pub fn new(schedule: Schedule, adam: AdamConfig) -> Self {
        Self {
            step: 0,
            schedule,
            adam,
            first: ParamStore::new(),
            second: ParamStore::new(),
        }
    }

    /// Applies one update. `grads` pairs parameter indices in `params` with
    /// their gradients; it must be sorted by index for a reproducible norm.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(usize, Vec<f64>)]) -> Result<f64> {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let clip = match self.adam.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let lr = self.schedule.rate(self.step);
        let AdamConfig { beta1, beta2, eps, .. } = self.adam;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (idx, g) in grads {
            let (name, value) = params.by_index(*idx);
            let name = name.to_string();
            let shape = value.shape().to_vec();
            if self.first.get(&name).is_none() {
                self.first.insert(name.clone(), crate::Tensor::zeros(&shape));
                self.second.insert(name.clone(), crate::Tensor::zeros(&shape));
            }
            let mi = self.first.position(&name).unwrap();
            let vi = self.second.position(&name).unwrap();
            let p = params.value_mut(*idx).data_mut();
            let m = self.first.value_mut(mi).data_mut();
            for (k, gk) in g.iter().enumerate() {
                let gk = gk * clip;
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            }
            let v = self.second.value_mut(vi).data_mut();
            for (k, gk) in g.iter().enumerate() {
                let gk = gk * clip;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            }
            let m = self.first.by_index(mi).1.data();
            let v = self.second.by_index(vi).1.data();
            for k in 0..p.len() {
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
