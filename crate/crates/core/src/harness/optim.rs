//! Adam with decoupled weight decay, one step counter per parameter.
//!
//! A parameter that received no gradient in a step is left untouched: no
//! decay, no moment update, no step count. This keeps decoder weights frozen
//! bit-for-bit until their loss term is switched on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::schedule::{lr_at, ParamGroup, TrainConfig};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub state: BTreeMap<String, MomentState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamSettings {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Update one parameter in place.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64, s: &AdamSettings) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {name}");
        let st = self.state.entry(name.to_string()).or_insert_with(|| MomentState {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            steps: 0,
        });
        st.steps += 1;
        let bc1 = 1.0 - s.beta1.powi(st.steps as i32);
        let bc2 = 1.0 - s.beta2.powi(st.steps as i32);
        let decay = 1.0 - lr * s.weight_decay;
        let p = param.data_mut();
        let m = st.m.data_mut();
        let v = st.v.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
            v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + s.eps);
        }
    }

    /// Apply one step to every parameter present in `grads`, using the
    /// per-group learning rate at `iteration`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        iteration: u64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        let s = AdamSettings::from_train(cfg);
        let lr_backbone = lr_at(iteration, ParamGroup::Backbone, cfg)?;
        let lr_head = lr_at(iteration, ParamGroup::Head, cfg)?;
        for (name, g) in grads {
            let lr = match ParamGroup::of(name) {
                ParamGroup::Backbone => lr_backbone,
                ParamGroup::Head => lr_head,
            };
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            self.update(name, p, g, lr, &s);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new();
        let s = AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0,
            weight_decay: 0.0,
        };
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]);
        opt.update("w", &mut p, &Tensor::new(&[2], vec![3.0, -0.5]), 0.1, &s);
        // bias-corrected first step is lr · sign(g)
        assert!((p.data()[0] - 0.9).abs() < 1e-12);
        assert!((p.data()[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = AdamW::new();
        let s = AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.5,
        };
        let mut p = Tensor::new(&[1], vec![2.0]);
        opt.update("w", &mut p, &Tensor::zeros(&[1]), 0.1, &s);
        assert!((p.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn untouched_without_gradient() {
        let mut params = ParamStore::new();
        params.insert("encoder.a", Tensor::ones(&[2]));
        params.insert("dp.b", Tensor::ones(&[2]));
        let before = params.get("dp.b").unwrap().clone();
        let mut grads = BTreeMap::new();
        grads.insert("encoder.a".to_string(), Tensor::ones(&[2]));
        let mut opt = AdamW::new();
        opt.step(&mut params, &grads, 0, &TrainConfig::default()).unwrap();
        assert_eq!(params.get("dp.b").unwrap(), &before);
        assert_ne!(params.get("encoder.a").unwrap(), &Tensor::ones(&[2]));
        assert!(!opt.state.contains_key("dp.b"));
    }
}
