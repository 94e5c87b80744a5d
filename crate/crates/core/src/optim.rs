use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::params::Parameters;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with per-array first/second moment buffers, keyed by parameter
/// position.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Arrays whose name satisfies `frozen` are left
    /// untouched.
    pub fn step<T: Parameters>(&mut self, model: &mut T, grads: &T, frozen: impl Fn(&str) -> bool) {
        let grads = grads.params();
        let mut params = model.params_mut();
        if self.first.is_empty() {
            self.first = grads.iter().map(|(_, g)| ArrayD::zeros(g.raw_dim())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);

        for (idx, ((name, p), (_, g))) in params.iter_mut().zip(grads.iter()).enumerate() {
            if frozen(name) {
                continue;
            }
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + weight_decay * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}
