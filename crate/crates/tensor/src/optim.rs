// SPDX-License-Identifier: Apache-2.0

use crate::param::ParamStore;
use serde::{Deserialize, Serialize};

/// Step-decay learning-rate schedule: `base * gamma^(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base_lr: f64,
    pub every_epochs: usize,
    pub gamma: f64,
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.every_epochs == 0 {
            return self.base_lr;
        }
        self.base_lr * self.gamma.powi((epoch / self.every_epochs) as i32)
    }
}

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.0)
    }
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.tensor.data_mut();
            for j in 0..data.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let mut upd = mhat / (vhat.sqrt() + self.eps);
                if self.weight_decay > 0.0 {
                    upd += self.weight_decay * data[j] as f64;
                }
                data[j] -= (lr * upd) as f32;
            }
        }
    }
}

/// Rescales accumulated gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
