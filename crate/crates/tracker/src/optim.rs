//! AdamW with decoupled weight decay and optional global-norm clipping.

use grm_core::nn::Module;
use grm_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackerError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to tensors with two or more dimensions only.
    pub weight_decay: f64,
    /// Gradients are rescaled so their global L2 norm is at most this;
    /// zero disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0
            && self.grad_clip.is_finite();
        if ok {
            Ok(())
        } else {
            Err(TrackerError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Global L2 norm over a set of gradient buffers.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

impl AdamW {
    /// State for parameters of the given sizes, in traversal order.
    pub fn new(cfg: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let zeros: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter tensor with its gradient; `grads`
    /// follows the module's traversal order.
    pub fn update<M: Module<Tensor>>(&mut self, params: &mut M, grads: &mut [Vec<f64>], lr: f64) {
        assert_eq!(self.m.len(), grads.len(), "one gradient per parameter");
        let limit = self.cfg.grad_clip;
        if limit > 0.0 {
            let norm = global_norm(grads);
            if norm > limit {
                let s = limit / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let decay = if p.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w -= lr * (update + decay * *w);
            }
            i += 1;
        });
    }
}
