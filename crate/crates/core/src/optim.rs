//! Adam with global-norm gradient clipping.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global L2 norm of the trainable gradients.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 0.5,
        }
    }
}

/// L2 norm over the gradients of all trainable parameters.
pub fn global_grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(_, p)| p.grad.norm_sq())
        .sum::<f64>()
        .sqrt()
}

/// Rescales trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut().filter(|p| !p.frozen) {
            p.grad.scale_in_place(s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Mat::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Clips, updates every trainable parameter, and zeroes all gradients.
    /// Returns the pre-clip gradient norm. On a non-finite gradient nothing is
    /// updated and the gradients are left in place for inspection.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<f64, OptimError> {
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| !p.frozen && !p.grad.all_finite())
        {
            return Err(OptimError::NonFiniteGradient(p.name.clone()));
        }
        let norm = clip_global_norm(store, self.cfg.clip);
        self.steps += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (k, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m)
                .zip(v)
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(norm)
    }
}
