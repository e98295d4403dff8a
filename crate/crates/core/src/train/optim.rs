use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nnet::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam with global-norm clipping, one moment buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts before any parameter
    /// changes and names the offending tensor.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<StepStats, TrainError> {
        if grads.grads.len() != params.len() {
            return Err(TrainError::Config(format!(
                "{} gradient tensors for {} parameters",
                grads.grads.len(),
                params.len()
            )));
        }
        for (id, g) in grads.grads.iter().enumerate() {
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    tensor: params.name(id).to_string(),
                    index: k,
                    value: g[k],
                });
            }
        }
        let c = self.config;
        let grad_norm = grads.norm();
        let clipped = c.clip_norm > 0.0 && grad_norm > c.clip_norm;
        let scale = if clipped { c.clip_norm / grad_norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.grads.iter().enumerate() {
            let p = &mut params.get_mut(id).data;
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for k in 0..g.len() {
                let gk = g[k] * scale;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(StepStats { grad_norm, clipped })
    }
}
