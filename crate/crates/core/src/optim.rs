//! AdamW with decoupled weight decay.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::model::{GradientSet, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates per parameter tensor, in the canonical
/// tensor order of [`ModelParams::tensors`].
#[derive(Clone, Debug)]
pub struct AdamWState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamWState {
    pub fn new(params: &ModelParams) -> AdamWState {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, data)| alloc::vec![0.0; data.len()])
            .collect();
        AdamWState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay update with bias correction. Decay shrinks
    /// parameters by `(1 − lr·wd)` independently of the gradient path.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientSet, cfg: &AdamWConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bias2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;

        let grad_tensors = grads.tensors();
        for (ti, (_, data)) in params.tensors_mut().into_iter().enumerate() {
            let g = grad_tensors[ti].1;
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            debug_assert_eq!(data.len(), g.len());
            for i in 0..data.len() {
                data[i] *= decay;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.epsilon);
            }
        }
    }
}
