//! Optimisation settings and the warm-up + polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with(crate::model::BACKBONE_PREFIX) {
            ParamGroup::Backbone
        } else {
            ParamGroup::Head
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub head_lr_mult: f64,
    pub max_iterations: u64,
    pub warmup_iterations: u64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub dp_start: u64,
    pub seed: u64,
    pub eval_interval: u64,
    pub log_interval: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub augment: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    /// Training crop; `None` uses the size of the training images.
    pub crop_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-5,
            head_lr_mult: 10.0,
            max_iterations: 30_000,
            warmup_iterations: 1500,
            poly_power: 0.9,
            batch_size: 8,
            dp_start: crate::objective::DEFAULT_DP_START,
            seed: 0,
            eval_interval: 30_000,
            log_interval: 10,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augment: true,
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
            crop_size: None,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_iterations == 0 {
            return bad("train.max_iterations must be positive");
        }
        if self.warmup_iterations >= self.max_iterations {
            return bad("train.warmup_iterations must be below train.max_iterations");
        }
        if !(self.base_lr > 0.0) || !(self.head_lr_mult > 0.0) || !(self.poly_power > 0.0) {
            return bad("learning rates and poly_power must be positive");
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.log_interval == 0 {
            return bad("batch_size, eval_interval and log_interval must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("invalid optimiser settings");
        }
        if !(self.adam_eps > 0.0) {
            return bad("train.adam_eps must be positive");
        }
        Ok(())
    }
}

/// Learning rate for `group` at `iteration`.
pub fn lr_at(iteration: u64, group: ParamGroup, cfg: &TrainConfig) -> Result<f64> {
    if iteration > cfg.max_iterations {
        return Err(Error::Range(format!(
            "iteration {iteration} beyond max_iterations {}",
            cfg.max_iterations
        )));
    }
    let base = if iteration < cfg.warmup_iterations {
        cfg.base_lr * ((iteration + 1) as f64 / cfg.warmup_iterations as f64)
    } else {
        let progress = (iteration - cfg.warmup_iterations) as f64
            / (cfg.max_iterations - cfg.warmup_iterations) as f64;
        cfg.base_lr * (1.0 - progress).powf(cfg.poly_power)
    };
    Ok(match group {
        ParamGroup::Backbone => base,
        ParamGroup::Head => base * cfg.head_lr_mult,
    })
}
