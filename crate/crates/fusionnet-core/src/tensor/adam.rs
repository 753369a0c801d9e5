//! Adam optimiser with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter that carries a gradient.
    /// Parameters without a gradient this step keep their moments and values.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            self.m = store
                .entries()
                .iter()
                .map(|e| vec![0.0; if e.trainable { e.tensor.numel() } else { 0 }])
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match parameter store"));
        }
        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for id in store.trainable_ids() {
            let idx = id.0;
            let entry = store.entry_mut(id);
            let Some(grad) = entry.tensor.grad.take() else {
                continue;
            };
            if grad.len() != entry.tensor.numel() {
                return Err(Error::invalid(format!(
                    "gradient length mismatch for parameter `{}`",
                    entry.name
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = entry.tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64) -> (ParamStore, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .add("p", Tensor::from_vec(vec![1], vec![value]).unwrap(), true)
            .unwrap();
        (store, id)
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let (mut store, id) = store_with(0.7);
        let mut adam = AdamState::new(AdamConfig::default());
        store.tensor_mut(id).grad = Some(vec![0.0]);
        adam.step(&mut store).unwrap();
        assert_eq!(store.tensor(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_is_lr_times_sign_of_grad() {
        // With bias correction, step 1 moves by lr * g / (|g| + eps').
        for g in [3.0, -0.25] {
            let (mut store, id) = store_with(1.0);
            let mut adam = AdamState::new(AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            });
            store.tensor_mut(id).grad = Some(vec![g]);
            adam.step(&mut store).unwrap();
            let moved = store.tensor(id).data()[0] - 1.0;
            assert!(
                (moved + 0.05 * g.signum()).abs() < 1e-6,
                "step {moved} vs expected {}",
                -0.05 * g.signum()
            );
        }
    }

    #[test]
    fn missing_grad_skips_parameter() {
        let (mut store, id) = store_with(2.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.tensor(id).data(), &[2.0]);
    }
}
