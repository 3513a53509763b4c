//! AdamW with decoupled weight decay.
//!
//! Frozen parameters are never touched — not even by decay — which is what
//! makes the bitwise freeze guarantees of the two training phases hold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DdrError, Result};
use crate::numerics::{GradMap, ParamSet, Scalar, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(DdrError::Invalid(format!("learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(DdrError::Invalid("betas must lie in [0, 1)".to_string()));
        }
        Ok(())
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moments<F: Scalar> {
    first: Tensor<F>,
    second: Tensor<F>,
}

/// Per-parameter moments plus the shared step counter.
pub struct OptimizerState<F: Scalar> {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        OptimizerState {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }
}

/// One AdamW update over every trainable entry of `params`.
///
/// Every trainable entry must have a gradient of matching shape; frozen
/// entries are skipped entirely.
pub fn adamw_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &GradMap<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    state.cfg.validate()?;
    state.step += 1;
    let t = state.step;
    let lr = F::from_f64(state.cfg.lr);
    let beta1 = F::from_f64(state.cfg.beta1);
    let beta2 = F::from_f64(state.cfg.beta2);
    let eps = F::from_f64(state.cfg.eps);
    let wd = F::from_f64(state.cfg.weight_decay);
    let bc1 = F::from_f64(1.0 - state.cfg.beta1.powi(t as i32));
    let bc2 = F::from_f64(1.0 - state.cfg.beta2.powi(t as i32));
    let one = F::one();

    for (name, param) in params.iter_mut() {
        if !param.trainable {
            continue;
        }
        let grad = grads
            .get(name)
            .ok_or_else(|| DdrError::MissingParam(format!("gradient for `{name}`")))?;
        if grad.shape() != param.tensor.shape() {
            return Err(DdrError::Shape(format!(
                "gradient for `{name}`: {:?} vs parameter {:?}",
                grad.shape(),
                param.tensor.shape()
            )));
        }
        grad.validate_finite(&format!("gradient for `{name}`"))?;

        let m = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            first: Tensor::zeros(param.tensor.shape()),
            second: Tensor::zeros(param.tensor.shape()),
        });
        let w = param.tensor.data_mut();
        let gd = grad.data();
        let md = m.first.data_mut();
        let vd = m.second.data_mut();
        for i in 0..w.len() {
            md[i] = beta1 * md[i] + (one - beta1) * gd[i];
            vd[i] = beta2 * vd[i] + (one - beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            w[i] = w[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]);
        }
        param
            .tensor
            .validate_finite(&format!("parameter `{name}` after update"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_of(entries: &[(&str, Vec<f64>, bool)]) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        for (name, values, trainable) in entries {
            ps.insert(
                name,
                Tensor::from_vec(&[values.len()], values.clone()).unwrap(),
                *trainable,
            )
            .unwrap();
        }
        ps
    }

    #[test]
    fn zero_gradient_applies_only_decay() {
        let mut ps = set_of(&[("w", vec![2.0, -3.0], true)]);
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        let mut state = OptimizerState::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.01,
            ..Default::default()
        });
        adamw_step(&mut ps, &grads, &mut state).unwrap();
        let w = ps.tensor("w").unwrap().data();
        assert!((w[0] - 2.0 * (1.0 - 1e-4)).abs() < 1e-15);
        assert!((w[1] - -3.0 * (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        // t=1, g=1, wd=0: m_hat = 1, v_hat = 1, step = -lr / (1 + eps)
        let mut ps = set_of(&[("w", vec![1.0], true)]);
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let lr = 0.05;
        let mut state = OptimizerState::new(AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        });
        adamw_step(&mut ps, &grads, &mut state).unwrap();
        let expected = 1.0 - lr * 1.0 / (1.0 + 1e-8);
        assert!((ps.tensor("w").unwrap().data()[0] - expected).abs() < 1e-12);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn identical_params_receive_identical_updates() {
        let mut ps = set_of(&[("a", vec![0.5], true), ("b", vec![0.5], true)]);
        let mut grads = GradMap::new();
        grads.insert("a".to_string(), Tensor::from_vec(&[1], vec![0.3]).unwrap());
        grads.insert("b".to_string(), Tensor::from_vec(&[1], vec![0.3]).unwrap());
        let mut state = OptimizerState::new(AdamWConfig::default());
        for _ in 0..5 {
            adamw_step(&mut ps, &grads, &mut state).unwrap();
        }
        assert_eq!(
            ps.tensor("a").unwrap().data()[0],
            ps.tensor("b").unwrap().data()[0]
        );
    }

    #[test]
    fn frozen_entries_are_bitwise_untouched() {
        let mut ps = set_of(&[("dam.w", vec![0.25, -0.5], false), ("rem.a", vec![1.0], true)]);
        let before = ps.clone();
        let mut grads = GradMap::new();
        // a gradient for the frozen entry may be present; it must be ignored
        grads.insert(
            "dam.w".to_string(),
            Tensor::from_vec(&[2], vec![9.0, 9.0]).unwrap(),
        );
        grads.insert("rem.a".to_string(), Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut state = OptimizerState::new(AdamWConfig::default());
        for _ in 0..10 {
            adamw_step(&mut ps, &grads, &mut state).unwrap();
        }
        assert!(ps.bitwise_eq_prefix(&before, "dam."));
        assert!(!ps.bitwise_eq_prefix(&before, "rem."));
    }

    #[test]
    fn missing_or_misshapen_gradients_name_the_path() {
        let mut ps = set_of(&[("rem.a", vec![1.0, 2.0], true)]);
        let mut state = OptimizerState::new(AdamWConfig::default());
        let err = adamw_step(&mut ps, &GradMap::new(), &mut state).unwrap_err();
        assert!(err.to_string().contains("rem.a"), "{err}");

        let mut grads = GradMap::new();
        grads.insert("rem.a".to_string(), Tensor::zeros(&[3]));
        let err = adamw_step(&mut ps, &grads, &mut state).unwrap_err();
        assert!(err.to_string().contains("rem.a"), "{err}");
    }
}
