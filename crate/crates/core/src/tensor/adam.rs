use std::collections::BTreeMap;

use super::params::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Learning rate per parameter group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupRates(BTreeMap<ParamGroup, f64>);

impl GroupRates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn uniform(lr: f64) -> Self {
        let mut rates = Self::new();
        for g in ParamGroup::ALL {
            rates.set(g, lr);
        }
        rates
    }

    pub fn with(mut self, group: ParamGroup, lr: f64) -> Self {
        self.set(group, lr);
        self
    }

    pub fn set(&mut self, group: ParamGroup, lr: f64) {
        self.0.insert(group, lr);
    }

    pub fn get(&self, group: ParamGroup) -> Option<f64> {
        self.0.get(&group).copied()
    }
}

impl ParamStore {
    /// One Adam update of every trainable parameter using its group's rate.
    /// Gradients are left untouched; call `zero_grad` before the next batch.
    pub fn adam_step(&mut self, rates: &GroupRates, cfg: &AdamConfig) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let p = self.get(id);
            if !p.trainable {
                continue;
            }
            let lr = rates.get(p.group).ok_or_else(|| {
                Error::invalid(format!(
                    "no learning rate for group `{}` (parameter `{}`)",
                    p.group, p.name
                ))
            })?;
            let p = self.get_mut(id);
            p.steps += 1;
            let t = p.steps as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let grads = p.grad.data().to_vec();
            let values = p.value.data_mut();
            for (i, g) in grads.iter().enumerate() {
                let m = &mut p.first_moment[i];
                let v = &mut p.second_moment[i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite("adam_step"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::scalar(1.0), ParamGroup::Scale, true)
            .unwrap();
        store.get_mut(id).grad.data_mut()[0] = 1.0;
        let rates = GroupRates::new().with(ParamGroup::Scale, 0.1);
        store.adam_step(&rates, &AdamConfig::default()).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_value_and_decays_moments() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::scalar(2.0), ParamGroup::TokenLevel, true)
            .unwrap();
        let rates = GroupRates::uniform(0.01);
        store.get_mut(id).grad.data_mut()[0] = 0.5;
        store.adam_step(&rates, &AdamConfig::default()).unwrap();
        let (m1, v1) = (store.get(id).first_moment[0], store.get(id).second_moment[0]);
        let before = store.value(id).item();
        store.zero_grad();
        // Moments decay but the bias-corrected step is nonzero while m != 0,
        // so check with a fresh parameter that never saw a gradient.
        store.adam_step(&rates, &AdamConfig::default()).unwrap();
        assert!((store.get(id).first_moment[0] - 0.9 * m1).abs() < 1e-15);
        assert!((store.get(id).second_moment[0] - 0.999 * v1).abs() < 1e-15);
        assert!(store.value(id).item() < before);

        let fresh = store
            .add("u", Tensor::scalar(3.0), ParamGroup::TokenLevel, true)
            .unwrap();
        store.adam_step(&rates, &AdamConfig::default()).unwrap();
        assert_eq!(store.value(fresh).item(), 3.0);
    }

    #[test]
    fn missing_group_rate_is_an_error() {
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::scalar(1.0), ParamGroup::FieldLevel, true)
            .unwrap();
        let rates = GroupRates::new().with(ParamGroup::Scale, 0.1);
        assert!(store.adam_step(&rates, &AdamConfig::default()).is_err());
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::scalar(1.0), ParamGroup::Scale, false)
            .unwrap();
        store.get_mut(id).grad.data_mut()[0] = 1.0;
        store
            .adam_step(&GroupRates::uniform(0.1), &AdamConfig::default())
            .unwrap();
        assert_eq!(store.value(id).item(), 1.0);
    }
}
