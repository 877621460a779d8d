//! Adam over every trainable entry of a [`ParamStore`].

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: IndexMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, scaled by
    /// `grad_scale`, then clears them. Frozen tensors and tensors without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            let t = &mut p.tensor;
            let Some(grad) = t.grad.take() else { continue };
            if !t.requires_grad {
                continue;
            }
            let n = t.data.len();
            let (m, v) = self.moments.entry(name.to_owned()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            for i in 0..n {
                let g = grad[i] * grad_scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                t.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap().with_grad(true));
        store.get_mut("w").unwrap().accumulate_grad(&[0.5, -2.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut store, 1.0);
        let w = &store.get("w").unwrap().data;
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert!(store.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn zero_gradient_entries_stay_bit_identical() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![0.0, 3.0]).unwrap().with_grad(true));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..50 {
            store.get_mut("w").unwrap().accumulate_grad(&[0.0, 1.0]);
            adam.step(&mut store, 1.0);
        }
        let w = &store.get("w").unwrap().data;
        assert_eq!(w[0].to_bits(), 0f64.to_bits());
        assert!(w[1] < 3.0);
    }
}
