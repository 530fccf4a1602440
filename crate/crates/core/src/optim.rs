//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::autograd::{GradSource, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: None,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    first: Vec<Option<Mat>>,
    second: Vec<Option<Mat>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient, at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &impl GradSource, lr: f64) {
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);

        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        let clip_scale = match c.grad_clip {
            Some(max_norm) => {
                let sq: f64 = ids
                    .iter()
                    .filter_map(|&id| grads.param_grad(id))
                    .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        for (slot, id) in store.ids().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.param_grad(id) else { continue };
            let w = store.get_mut(id);
            let m = self.first[slot].get_or_insert_with(|| Mat::zeros(w.rows(), w.cols()));
            let v = self.second[slot].get_or_insert_with(|| Mat::zeros(w.rows(), w.cols()));
            for k in 0..w.len() {
                let gk = g.as_slice()[k] * clip_scale + c.weight_decay * w.as_slice()[k];
                let mk = c.beta1 * m.as_slice()[k] + (1.0 - c.beta1) * gk;
                let vk = c.beta2 * v.as_slice()[k] + (1.0 - c.beta2) * gk * gk;
                m.as_mut_slice()[k] = mk;
                v.as_mut_slice()[k] = vk;
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
                w.as_mut_slice()[k] -= update;
            }
        }
    }
}
