//! Adam and LAMB behind one interface, with linear warmup then linear decay.
//!
//! Only trainable parameters are visited: frozen parameters get no state, no
//! update, and therefore stay bit-identical through any number of steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{Real, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Lamb,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Fraction of `steps` spent on linear warmup; linear decay afterwards.
    pub warmup_fraction: f64,
}

impl OptimizerConfig {
    /// Desk-scale pretraining defaults.
    pub fn pretrain_default(steps: usize) -> Self {
        OptimizerConfig {
            algorithm: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 16,
            steps,
            warmup_fraction: 0.1,
        }
    }

    /// Fine-tuning defaults: Adam, learning rate 2e-5, batch 32 (steps are
    /// derived from 2 epochs over the task data by the caller).
    pub fn finetune_default(steps: usize) -> Self {
        OptimizerConfig {
            algorithm: OptimizerKind::Adam,
            learning_rate: 2e-5,
            batch_size: 32,
            steps,
            warmup_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::config("batch size and steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup fraction must be in [0, 1)"));
        }
        Ok(())
    }

    /// Linear warmup to the peak rate, then linear decay to zero.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let total = self.steps as f64;
        let warmup = (self.warmup_fraction * total).max(1.0);
        let s = step as f64;
        if s <= warmup {
            self.learning_rate * s / warmup
        } else {
            let remaining = (total - s) / (total - warmup).max(1.0);
            self.learning_rate * remaining.max(0.0)
        }
    }
}

/// First/second-moment state per parameter, keyed by name.
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub step: usize,
    state: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// Returns the learning rate used.
    pub fn apply(&mut self, store: &mut ParamStore<T>) -> f64 {
        self.step += 1;
        let lr = self.config.learning_rate_at(self.step);
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let b1 = T::from_f64(BETA1);
        let b2 = T::from_f64(BETA2);
        let one_m_b1 = T::from_f64(1.0 - BETA1);
        let one_m_b2 = T::from_f64(1.0 - BETA2);
        let eps = T::from_f64(EPS);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);

        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad() else { continue };
            let grad = grad.to_vec();
            let n = grad.len();
            let (m, v) = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let mut direction = vec![T::zero(); n];
            for i in 0..n {
                m[i] = b1 * m[i] + one_m_b1 * grad[i];
                v[i] = b2 * v[i] + one_m_b2 * grad[i] * grad[i];
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                direction[i] = m_hat / (v_hat.sqrt() + eps);
            }
            let scale = match self.config.algorithm {
                OptimizerKind::Adam => T::from_f64(lr),
                OptimizerKind::Lamb => {
                    // Trust ratio ||w|| / ||r||, neutral when either norm
                    // vanishes; clamped to keep early steps sane.
                    let w_norm = p
                        .tensor
                        .data()
                        .iter()
                        .map(|&x| x * x)
                        .sum::<T>()
                        .sqrt()
                        .to_f64();
                    let r_norm = direction
                        .iter()
                        .map(|&x| x * x)
                        .sum::<T>()
                        .sqrt()
                        .to_f64();
                    let trust = if w_norm > 0.0 && r_norm > 0.0 {
                        (w_norm / r_norm).clamp(1e-3, 10.0)
                    } else {
                        1.0
                    };
                    T::from_f64(lr * trust)
                }
            };
            for (x, d) in p.tensor.data_mut().iter_mut().zip(&direction) {
                *x = *x - scale * *d;
            }
            p.tensor.clear_grad();
        }
        lr
    }

    /// Serialize moments as extra checkpoint tensors (`opt.m.*`, `opt.v.*`).
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.state {
            out.insert(
                format!("opt.m.{name}"),
                Tensor::new(vec![m.len()], m.clone()).expect("flat shape"),
            );
            out.insert(
                format!("opt.v.{name}"),
                Tensor::new(vec![v.len()], v.clone()).expect("flat shape"),
            );
        }
        out
    }

    /// Restore moments from checkpoint extra tensors.
    pub fn restore_state(
        &mut self,
        step: usize,
        tensors: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.step = step;
        self.state.clear();
        for (key, tensor) in tensors {
            if let Some(name) = key.strip_prefix("opt.m.") {
                let v_key = format!("opt.v.{name}");
                let v = tensors.get(&v_key).ok_or_else(|| {
                    Error::Integrity(format!("optimizer state missing `{v_key}`"))
                })?;
                self.state.insert(
                    name.to_string(),
                    (tensor.data().to_vec(), v.data().to_vec()),
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GroupTag;

    fn store_with(values: Vec<f32>, trainable: bool) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let n = values.len();
        let idx = store.insert("w", GroupTag::Body, Tensor::new(vec![n], values).unwrap());
        store.by_idx_mut(idx).trainable = trainable;
        store
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize 0.5*||w||^2, grad = w
        let mut store = store_with(vec![1.0, -2.0, 3.0], true);
        let mut opt = Optimizer::new(OptimizerConfig {
            algorithm: OptimizerKind::Adam,
            learning_rate: 0.1,
            batch_size: 1,
            steps: 200,
            warmup_fraction: 0.1,
        })
        .unwrap();
        for _ in 0..200 {
            let data = store.get("w").unwrap().tensor.data().to_vec();
            let g = store.get_mut("w").unwrap().tensor.grad_mut();
            g.copy_from_slice(&data);
            opt.apply(&mut store);
        }
        let norm: f32 = store
            .get("w")
            .unwrap()
            .tensor
            .data()
            .iter()
            .map(|v| v * v)
            .sum();
        assert!(norm < 1e-3, "norm {norm}");
    }

    #[test]
    fn lamb_descends_too() {
        let mut store = store_with(vec![2.0, -1.0], true);
        let mut opt = Optimizer::new(OptimizerConfig {
            algorithm: OptimizerKind::Lamb,
            learning_rate: 0.05,
            batch_size: 1,
            steps: 300,
            warmup_fraction: 0.1,
        })
        .unwrap();
        let start: f32 = store.get("w").unwrap().tensor.data().iter().map(|v| v * v).sum();
        for _ in 0..300 {
            let data = store.get("w").unwrap().tensor.data().to_vec();
            let g = store.get_mut("w").unwrap().tensor.grad_mut();
            g.copy_from_slice(&data);
            opt.apply(&mut store);
        }
        let end: f32 = store.get("w").unwrap().tensor.data().iter().map(|v| v * v).sum();
        assert!(end < start * 0.01, "{start} -> {end}");
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut store = store_with(vec![1.5, 2.5], false);
        let before = store.get("w").unwrap().tensor.clone();
        let mut opt = Optimizer::new(OptimizerConfig {
            algorithm: OptimizerKind::Adam,
            learning_rate: 0.5,
            batch_size: 1,
            steps: 10,
            warmup_fraction: 0.1,
        })
        .unwrap();
        for _ in 0..10 {
            // Even with a gradient buffer filled in, frozen means ignored.
            store.get_mut("w").unwrap().tensor.grad_mut().fill(7.0);
            opt.apply(&mut store);
        }
        assert_eq!(store.get("w").unwrap().tensor.data(), before.data());
        assert!(opt.state_tensors().is_empty());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let config = OptimizerConfig {
            algorithm: OptimizerKind::Adam,
            learning_rate: 1.0,
            batch_size: 1,
            steps: 100,
            warmup_fraction: 0.1,
        };
        assert!(config.learning_rate_at(1) < 0.2);
        assert!((config.learning_rate_at(10) - 1.0).abs() < 1e-12);
        assert!(config.learning_rate_at(55) < 1.0);
        assert!(config.learning_rate_at(100) < 1e-12);
        // Monotone decay after warmup.
        let mut prev = config.learning_rate_at(10);
        for s in 11..=100 {
            let lr = config.learning_rate_at(s);
            assert!(lr <= prev + 1e-12);
            prev = lr;
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut store = store_with(vec![1.0, 2.0, 3.0], true);
        let config = OptimizerConfig {
            algorithm: OptimizerKind::Adam,
            learning_rate: 0.1,
            batch_size: 1,
            steps: 50,
            warmup_fraction: 0.1,
        };
        let mut opt = Optimizer::new(config).unwrap();
        for _ in 0..5 {
            store.get_mut("w").unwrap().tensor.grad_mut().fill(0.5);
            opt.apply(&mut store);
        }
        let tensors = opt.state_tensors();
        let mut restored = Optimizer::<f32>::new(config).unwrap();
        restored.restore_state(opt.step, &tensors).unwrap();
        // Continue both and compare bit-for-bit.
        let mut s2 = ParamStore::new();
        let idx = s2.insert("w", GroupTag::Body, store.get("w").unwrap().tensor.clone());
        s2.by_idx_mut(idx).trainable = true;
        for _ in 0..3 {
            store.get_mut("w").unwrap().tensor.grad_mut().fill(0.25);
            s2.get_mut("w").unwrap().tensor.grad_mut().fill(0.25);
            opt.apply(&mut store);
            restored.apply(&mut s2);
        }
        assert_eq!(
            store.get("w").unwrap().tensor.data(),
            s2.get("w").unwrap().tensor.data()
        );
    }

    #[test]
    fn config_validation_rejects_nonpositive_values() {
        let mut config = OptimizerConfig::pretrain_default(10);
        config.learning_rate = 0.0;
        assert!(config.validate().is_err());
        let mut config = OptimizerConfig::pretrain_default(10);
        config.batch_size = 0;
        assert!(config.validate().is_err());
        let config = OptimizerConfig::pretrain_default(0);
        assert!(config.validate().is_err());
    }
}
