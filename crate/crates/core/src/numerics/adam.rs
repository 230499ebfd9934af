use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    /// Updates applied through this buffer; drives bias correction, so a
    /// parameter unfrozen mid-run is corrected as if freshly started.
    updates: u32,
}

/// Adam with per-parameter moment buffers held only for trainable params.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    pub fn num_buffers(&self) -> usize {
        self.moments.len()
    }

    /// One bias-corrected Adam update of every trainable parameter. Frozen
    /// parameters are left bitwise unchanged. All gradients are cleared.
    pub fn adam_step(&mut self, store: &mut ParamStore<f32>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.tensor.grad().is_none()) {
            return Err(Error::Optimizer(format!(
                "trainable parameter `{}` has no gradient",
                p.name()
            )));
        }
        self.moments.retain(|id, _| store.get(*id).trainable);
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (id, p) in store.iter_mut() {
            let grad = p.tensor.take_grad();
            if !p.trainable {
                continue;
            }
            let grad = grad.expect("checked above");
            let mom = self.moments.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                updates: 0,
            });
            mom.updates += 1;
            let bc1 = 1.0 - beta1.powi(mom.updates as i32);
            let bc2 = 1.0 - beta2.powi(mom.updates as i32);
            for (((w, &g), m), v) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Group, Tensor};

    fn store_with(value: f32, grad: f32, trainable: bool) -> (ParamStore<f32>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(
            "w",
            Group::Adapter,
            Tensor::new(vec![1], vec![value]).unwrap(),
        )
        .unwrap();
        s.get_mut(id).trainable = trainable;
        s.get_mut(id).tensor.accumulate_grad(&[grad], 1.0);
        (s, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the first update is lr·g/(|g| + ε).
        let (mut s, id) = store_with(0.5, 1.0, true);
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.adam_step(&mut s).unwrap();
        let moved = 0.5 - s.get(id).tensor.data()[0];
        let want = 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((moved - want).abs() < 1e-6, "moved {moved}");
        assert_eq!(adam.step_count(), 1);
        assert!(s.get(id).tensor.grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_params_bitwise_unchanged() {
        let (mut s, id) = store_with(-0.123_456_7, 0.0, true);
        let before = s.get(id).tensor.clone();
        AdamState::new(AdamConfig::default()).adam_step(&mut s).unwrap();
        assert!(s.get(id).tensor.bit_eq(&before));
    }

    #[test]
    fn frozen_param_with_gradient_is_untouched() {
        let (mut s, id) = store_with(2.5, 7.0, false);
        let before = s.get(id).tensor.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.adam_step(&mut s).unwrap();
        assert!(s.get(id).tensor.bit_eq(&before));
        assert!(!adam.has_moments(id));
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let (mut s, id) = store_with(1.0, 1.0, true);
        s.get_mut(id).tensor.clear_grad();
        let err = AdamState::new(AdamConfig::default()).adam_step(&mut s).unwrap_err();
        assert!(matches!(err, Error::Optimizer(_)));
    }

    #[test]
    fn buffers_dropped_when_param_refrozen() {
        let (mut s, id) = store_with(1.0, 1.0, true);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.adam_step(&mut s).unwrap();
        assert!(adam.has_moments(id));
        s.get_mut(id).trainable = false;
        adam.adam_step(&mut s).unwrap();
        assert!(!adam.has_moments(id));
        assert_eq!(adam.step_count(), 2);
    }
}
