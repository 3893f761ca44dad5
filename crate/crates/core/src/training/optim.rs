//! Adam and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Float;

/// `base * factor^floor(step / every)`.
pub fn staircase_lr(base: f64, factor: f64, every: u64, step: u64) -> f64 {
    if every == 0 {
        return base;
    }
    base * factor.powi((step / every) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated on first use.
#[derive(Debug, Clone)]
pub struct Adam<T: Float> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update with the given gradients (by parameter id).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(usize, Vec<T>)], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        for (id, g) in grads {
            let p = params.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[*id], &mut self.v[*id]);
            if m.is_empty() {
                *m = vec![T::zero(); g.len()];
                *v = vec![T::zero(); g.len()];
            }
            for k in 0..g.len() {
                let gk = g[k].as_f64();
                let mk = beta1 * m[k].as_f64() + (1.0 - beta1) * gk;
                let vk = beta2 * v[k].as_f64() + (1.0 - beta2) * gk * gk;
                m[k] = T::lit(mk);
                v[k] = T::lit(vk);
                let upd = lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
                p.data[k] -= T::lit(upd);
            }
        }
    }
}
