//! Training loop.
//!
//! Each step: sample and augment a batch, run the network, add the CAM
//! classification loss, the gated decoder loss once `dp_start` is reached,
//! the label-gated penalty, then back-propagate and take one AdamW step.
//! Batch order, augmentation and dropout draw from streams keyed by
//! `(seed, iteration, slot)`, so a run is a pure function of its config.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::{DataSource, RunConfig};
use super::eval::{evaluate, EvalReport, Which};
use super::optim::AdamW;
use super::schedule::{lr_at, ParamGroup};
use crate::autograd::{Tape, Var};
use crate::cam::{self, ChangeMask, ImageLabel};
use crate::data::{self, augment, AugmentConfig, ImagePair, Split, SynthSpec};
use crate::decoder;
use crate::error::{Error, Result};
use crate::lg::{self, ChangedMask, MaskSource};
use crate::model::{masks_from_cam, Model};
use crate::objective::{self, cp_weight, LossVars};
use crate::params::Binder;
use crate::rng::derived_rng;
use crate::tensor::Tensor;

const STREAM_ORDER: u64 = 0x0DE2;
const STREAM_AUGMENT: u64 = 0xA06E;
const STREAM_DROPOUT: u64 = 0xD209;

/// One logged training step. Parts a mode does not use are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: u64,
    pub lr: f64,
    pub l_cc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_cp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cp_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_lg: Option<f64>,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogLine {
    Step(StepLog),
    Eval { iteration: u64, eval: EvalReport },
}

/// Materialise a split described by the data config.
pub fn load_split(run: &RunConfig, split: Split) -> Result<Vec<ImagePair>> {
    match &run.data.source {
        DataSource::Synthetic {
            num_pairs,
            size,
            changed_ratio,
            seed,
            max_objects,
        } => data::generate_split(
            &SynthSpec {
                num_pairs: *num_pairs,
                size: *size,
                changed_ratio: *changed_ratio,
                seed: *seed,
                max_objects: *max_objects,
            },
            split,
        ),
        DataSource::Directory { root } => data::load_pair_dataset(root, split),
    }
}

pub struct Trainer<'d> {
    pub run: RunConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// Next iteration to run.
    pub iteration: u64,
    data: &'d [ImagePair],
    augment: Option<AugmentConfig>,
    crop: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(run: &RunConfig, data: &'d [ImagePair]) -> Result<Self> {
        let mut model = Model::new(run.model.clone(), run.train.seed)?;
        if let Some(path) = &run.encoder_init {
            import_encoder(&mut model, &Checkpoint::load(path)?)?;
        }
        Self::with_model(run, model, AdamW::new(), 0, data)
    }

    pub fn resume(run: &RunConfig, ckpt: Checkpoint, data: &'d [ImagePair]) -> Result<Self> {
        let model = Model::from_parts(run.model.clone(), ckpt.params)?;
        Self::with_model(run, model, ckpt.optimizer, ckpt.iteration, data)
    }

    fn with_model(run: &RunConfig, model: Model, optimizer: AdamW, iteration: u64, data: &'d [ImagePair]) -> Result<Self> {
        run.train.check()?;
        let first = data
            .first()
            .ok_or_else(|| Error::Config("training split is empty".into()))?;
        let (h, w) = first.dims();
        let crop = run.train.crop_size.unwrap_or(h);
        let t = &run.train;
        let augment = if t.augment {
            let a = AugmentConfig {
                scale_min: t.scale_min,
                scale_max: t.scale_max,
                flip_prob: t.flip_prob,
                crop_size: crop,
            };
            a.check()?;
            Some(a)
        } else {
            if data.iter().any(|p| p.dims() != (crop, crop)) || h != w {
                return Err(Error::Config(format!(
                    "without augmentation every training pair must be {crop}x{crop}"
                )));
            }
            None
        };
        Ok(Self {
            run: run.clone(),
            model,
            optimizer,
            iteration,
            data,
            augment,
            crop,
        })
    }

    pub fn crop_size(&self) -> usize {
        self.crop
    }

    /// Dataset indices for `iteration`: epochs walk seeded permutations.
    pub fn batch_indices(&self, iteration: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.run.train.batch_size as u64;
        let mut perms: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        (0..b)
            .map(|slot| {
                let g = iteration * b + slot;
                let perm = perms.entry(g / n).or_insert_with(|| {
                    let mut p: Vec<usize> = (0..n as usize).collect();
                    p.shuffle(&mut derived_rng(self.run.train.seed, STREAM_ORDER, g / n));
                    p
                });
                perm[(g % n) as usize]
            })
            .collect()
    }

    pub fn batch(&self, iteration: u64) -> Vec<ImagePair> {
        let b = self.run.train.batch_size as u64;
        self.batch_indices(iteration)
            .into_iter()
            .enumerate()
            .map(|(slot, i)| match &self.augment {
                Some(cfg) => {
                    let mut rng = derived_rng(self.run.train.seed, STREAM_AUGMENT, iteration * b + slot as u64);
                    augment(&self.data[i], cfg, &mut rng)
                }
                None => self.data[i].clone(),
            })
            .collect()
    }

    /// Run one optimisation step and advance the iteration counter.
    pub fn step(&mut self) -> Result<StepLog> {
        let it = self.iteration;
        let batch = self.batch(it);
        let (log, grads) = self.forward_backward(it, &batch)?;
        self.optimizer
            .step(&mut self.model.params, &grads, it, &self.run.train)?;
        self.iteration += 1;
        Ok(log)
    }

    /// Loss parts and named gradients for a batch, without updating anything.
    pub fn forward_backward(&self, it: u64, batch: &[ImagePair]) -> Result<(StepLog, BTreeMap<String, Tensor>)> {
        let run = &self.run;
        let mode = run.model.mode;
        let lg_cfg = &run.model.lg;
        let labels: Vec<ImageLabel> = batch.iter().map(|p| p.y_cls).collect();
        let (pre, post) = data::stack_pairs(batch);
        let (_, _, h, w) = pre.dims4();
        let gate_open = it >= run.train.dp_start;
        let lg_live = mode.uses_lg() && lg_cfg.alpha > 0.0;

        let tape = Tape::new();
        let mut binder = Binder::new(&tape, &self.model.params);
        if run.model.encoder.drop_rate > 0.0 {
            binder = binder.with_dropout(
                run.model.encoder.drop_rate,
                derived_rng(run.train.seed, STREAM_DROPOUT, it),
            );
        }
        let fwd = self
            .model
            .forward(&binder, tape.constant(pre.clone()), tape.constant(post.clone()))?;
        let l_cc = cam::loss_cc(fwd.p_cls, &labels);

        let need_decoder = mode.uses_dp() && (gate_open || (lg_live && lg_cfg.mask_source == MaskSource::Final));
        let dp = if need_decoder {
            Some(self.model.decode_var(&binder, fwd.feat_d4, (h, w))?)
        } else {
            None
        };
        let need_init = (mode.uses_dp() && gate_open) || (lg_live && lg_cfg.mask_source == MaskSource::Init);
        let init_masks = if need_init {
            // without dropout the training forward is the unit-scale inference pass
            let unit = (run.model.encoder.drop_rate == 0.0).then(|| fwd.raw_cam.value());
            let fused = self.model.multiscale_cam_reusing(&pre, &post, unit.as_deref())?;
            Some(masks_from_cam(&fused, &run.model.cam)?)
        } else {
            None
        };

        let l_cp = match (&dp, gate_open && mode.uses_dp()) {
            (Some((_, p_dp)), true) => {
                let masks = init_masks.as_ref().expect("computed when the gate is open");
                let targets: Vec<_> = labels
                    .iter()
                    .zip(masks)
                    .map(|(&l, m)| decoder::select_target(l, m))
                    .collect();
                Some(decoder::loss_cp(*p_dp, &decoder::targets_tensor(&targets))?)
            }
            _ => None,
        };

        let l_lg = if !mode.uses_lg() {
            None
        } else if !lg_live {
            Some(tape.constant(Tensor::scalar(0.0)))
        } else {
            let (preds, feats, logits): (Vec<ChangeMask>, Tensor, Var<'_>) = match lg_cfg.mask_source {
                MaskSource::Final => {
                    let (feat_dp, p_dp) = dp.expect("decoder runs when LG reads its prediction");
                    let value = p_dp.value();
                    let preds = (0..labels.len())
                        .map(|i| decoder::predict_final(&value.sample(i)))
                        .collect();
                    // before the gate opens no loss term may reach the decoder
                    let logits = if gate_open { p_dp } else { tape.constant((*value).clone()) };
                    (preds, (*feat_dp.value()).clone(), logits)
                }
                MaskSource::Init => (
                    init_masks.clone().expect("computed for LG"),
                    (*fwd.feat_d4.value()).clone(),
                    fwd.raw_cam,
                ),
            };
            let masks: Vec<ChangedMask> = preds
                .iter()
                .enumerate()
                .map(|(i, p)| lg::changed_mask(p, &feats.sample(i)))
                .collect::<Result<_>>()?;
            Some(lg::penalty(&tape, &labels, &masks, lg_cfg, Some(logits))?)
        };

        let total = objective::compose(
            &LossVars { l_cc, l_cp, l_lg },
            mode,
            run.model.epsilon_cp,
            it,
            run.train.dp_start,
        )?;
        let log = StepLog {
            iteration: it,
            lr: lr_at(it, ParamGroup::Backbone, &run.train)?,
            l_cc: l_cc.value().item(),
            l_cp: l_cp.map(|v| v.value().item()),
            cp_weight: mode
                .uses_dp()
                .then(|| cp_weight(run.model.epsilon_cp, it, run.train.dp_start)),
            l_lg: l_lg.map(|v| v.value().item()),
            l_total: total.value().item(),
        };
        if !log.l_total.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                detail: serde_json::to_string(&log).unwrap_or_default(),
            });
        }
        let grads = tape.backward(total);
        Ok((log, binder.gradients(&grads)))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.run.to_ini(),
            iteration: self.iteration,
            rng: RngState {
                seed: self.run.train.seed,
                iteration: self.iteration,
            },
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Train until `max_iterations`, reporting log lines to `sink`.
    pub fn run(&mut self, eval_data: Option<&[ImagePair]>, sink: &mut dyn FnMut(&LogLine)) -> Result<()> {
        let t = self.run.train.clone();
        while self.iteration < t.max_iterations {
            let log = self.step()?;
            if log.iteration % t.log_interval == 0 || log.iteration + 1 == t.max_iterations {
                sink(&LogLine::Step(log));
            }
            if let Some(eval) = eval_data {
                if self.iteration % t.eval_interval == 0 {
                    let which = if self.model.has_decoder() { Which::Final } else { Which::Initial };
                    let report = evaluate(&self.model, eval, which)?;
                    sink(&LogLine::Eval {
                        iteration: self.iteration,
                        eval: report,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Copy `encoder.*` weights from another checkpoint (shapes must match).
pub fn import_encoder(model: &mut Model, source: &Checkpoint) -> Result<()> {
    let names: Vec<String> = model
        .params
        .names_with_prefix(crate::model::BACKBONE_PREFIX)
        .map(str::to_string)
        .collect();
    for name in names {
        let src = source
            .params
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("encoder weight {name} missing from import")))?;
        let dst = model.params.get_mut(&name).expect("listed above");
        if src.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!("encoder weight {name} has a different shape")));
        }
        *dst = src.clone();
    }
    Ok(())
}

/// Rebuild a model from a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, Model)> {
    let run = RunConfig::parse(&ckpt.config_text, &[])?;
    let model = Model::from_parts(run.model.clone(), ckpt.params.clone())?;
    Ok((run, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run(extra: &str) -> RunConfig {
        let text = format!(
            "[model]\nencoder = tiny\n[dp]\nbranch_channels = 4\nstart_iteration = 2\n[cam]\nscales = 1.0\n\
             [train]\nbatch_size = 2\nmax_iterations = 4\nwarmup_iterations = 1\nlog_interval = 1\nbase_lr = 1e-3\n\
             [data]\nnum_pairs = 6\nsize = 32\n{extra}"
        );
        RunConfig::parse(&text, &[]).unwrap()
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let run = tiny_run("");
        let data = load_split(&run, Split::Train).unwrap();
        let t = Trainer::new(&run, &data).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|i| t.batch_indices(i)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(t.batch(1), t.batch(1));
    }

    #[test]
    fn decoder_frozen_until_gate() {
        let run = tiny_run("");
        let data = load_split(&run, Split::Train).unwrap();
        let mut t = Trainer::new(&run, &data).unwrap();
        let dp_before: Vec<Tensor> = t
            .model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("dp."))
            .map(|(_, v)| v.clone())
            .collect();
        let l0 = t.step().unwrap();
        let l1 = t.step().unwrap();
        assert_eq!(l0.cp_weight, Some(0.0));
        assert_eq!(l1.l_cp, None);
        let dp_after: Vec<Tensor> = t
            .model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("dp."))
            .map(|(_, v)| v.clone())
            .collect();
        assert_eq!(dp_before, dp_after);
        let l2 = t.step().unwrap();
        assert_eq!(l2.cp_weight, Some(0.1));
        assert!(l2.l_cp.is_some());
        let moved = t
            .model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("dp."))
            .zip(&dp_before)
            .any(|((_, a), b)| a != b);
        assert!(moved);
    }

    #[test]
    fn plain_mode_logs_only_cc() {
        let mut run = tiny_run("");
        run.model.mode = objective::Mode::Transwcd;
        let data = load_split(&run, Split::Train).unwrap();
        let mut t = Trainer::new(&run, &data).unwrap();
        let log = t.step().unwrap();
        let json = serde_json::to_value(&log).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 4);
        for k in ["iteration", "lr", "l_cc", "l_total"] {
            assert!(keys.contains(&k));
        }
        assert_eq!(log.l_cc, log.l_total);
    }
}
