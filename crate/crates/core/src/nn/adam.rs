use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};

/// Adaptive moment optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr_t = (c.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        for i in 0..params.len() {
            let Some(g) = grads.get(i) else { continue };
            let p: &mut Tensor<f32> = params.tensor_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr_t * *mi / (vi.sqrt() + eps);
            }
        }
    }
}
