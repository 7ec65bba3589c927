use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

/// AdamW hyperparameters. Defaults: l = 1e-2, eps = 1e-8, β1 = 0.9, β2 = 0.98.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-2,
            eps: 1e-8,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with decoupled weight decay.
///
/// Moments are keyed by parameter name, so state for shared parameters is
/// carried across tasks while freshly registered parameters start from zero.
/// Each parameter keeps its own step count for bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Number of completed optimizer steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.state.get(name).map(|s| s.m.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.state.get(name).map(|s| s.v.as_slice())
    }

    /// Updates every trainable parameter from its gradient. Frozen
    /// parameters are skipped entirely.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable && p.grad.is_none() {
                return Err(Error::invalid_state(format!(
                    "trainable parameter `{}` has no gradient",
                    p.name
                )));
            }
        }
        self.steps += 1;
        let AdamWConfig {
            lr,
            eps,
            beta1,
            beta2,
            weight_decay,
        } = self.config;

        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let n = p.value.len();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            if st.m.len() != n {
                return Err(Error::invalid_state(format!(
                    "optimizer state for `{}` has {} entries, parameter has {n}",
                    p.name,
                    st.m.len()
                )));
            }
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let decay = 1.0 - lr * weight_decay;
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *w *= decay;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with(values: Vec<f64>, grad: Vec<f64>, trainable: bool) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(values), trainable).unwrap();
        if trainable {
            store.get_mut(id).grad = Some(Tensor::row(grad));
        }
        store
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = store_with(vec![1.5, -2.0], vec![0.0, 0.0], true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store).unwrap();
        assert_eq!(store.by_name("w").unwrap().value.data(), &[1.5, -2.0]);
    }

    #[test]
    fn zero_gradient_applies_only_decay() {
        let mut store = store_with(vec![1.5, -2.0], vec![0.0, 0.0], true);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg.clone());
        opt.step(&mut store).unwrap();
        let f = 1.0 - cfg.lr * cfg.weight_decay;
        assert_eq!(store.by_name("w").unwrap().value.data(), &[1.5 * f, -2.0 * f]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after one step with g = 1, so the move is lr / (1 + eps).
        let mut store = store_with(vec![0.0], vec![1.0], true);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg.clone());
        opt.step(&mut store).unwrap();
        let moved = -store.by_name("w").unwrap().value.data()[0];
        assert!((moved - cfg.lr / (1.0 + cfg.eps)).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = store_with(vec![0.25, 3.0], vec![], false);
        let before = store.by_name("w").unwrap().value.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..10 {
            opt.step(&mut store).unwrap();
        }
        assert!(store.by_name("w").unwrap().value.bit_eq(&before));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(vec![1.0]), true).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut store), Err(Error::InvalidState(_))));
        assert_eq!(opt.steps(), 0);
    }
}
