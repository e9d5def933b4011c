//! Full change-detection network: difference module, encoder, CAM head and
//! (for the decoder modes) the dilated prior decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cam::{self, CamConfig, ChangeMask};
use crate::decoder::{self, DilationConfig};
use crate::difference::{self, DifferenceVariant, Placement};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::lg::LgConfig;
use crate::objective::{Mode, DEFAULT_EPSILON_CP};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

/// Prefix of every backbone parameter; all other parameters form the head group.
pub const BACKBONE_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub difference: DifferenceVariant,
    pub encoder: EncoderConfig,
    pub cam: CamConfig,
    pub dp: DilationConfig,
    pub lg: LgConfig,
    pub epsilon_cp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TranswcdDl,
            difference: DifferenceVariant::late_default(),
            encoder: EncoderConfig::desk(),
            cam: CamConfig::default(),
            dp: DilationConfig::desk(),
            lg: LgConfig::default(),
            epsilon_cp: DEFAULT_EPSILON_CP,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        self.encoder.check()?;
        self.cam.check()?;
        self.dp.check()?;
        self.lg.check()?;
        DifferenceVariant::new(self.difference.placement, self.difference.kind)?;
        if !(self.epsilon_cp >= 0.0) || !self.epsilon_cp.is_finite() {
            return Err(Error::Config(format!("epsilon_cp {} must be >= 0", self.epsilon_cp)));
        }
        Ok(())
    }
}

/// Differentiable outputs of one forward pass.
#[derive(Clone, Copy)]
pub struct Forward<'t> {
    /// `[N, C4, h, w]`
    pub feat_d4: Var<'t>,
    /// `[N]`
    pub p_cls: Var<'t>,
    /// `[N, 1, h, w]`
    pub raw_cam: Var<'t>,
}

/// Inference outputs for a batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub p_cls: Vec<f64>,
    /// Fused multi-scale CAM, `[N, 1, H, W]`.
    pub cam: Tensor,
    pub pred_init: Vec<ChangeMask>,
    /// Decoder logits, `[N, 1, H, W]`.
    pub p_dp: Option<Tensor>,
    pub pred_final: Option<Vec<ChangeMask>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c4 = config.encoder.last_dim();
        encoder::init_params(&config.encoder, 3, &mut params, &mut rng);
        difference::init_params(&config.difference, c4, &mut params, &mut rng);
        cam::init_params(c4, &mut params, &mut rng);
        if config.mode.uses_dp() {
            decoder::init_params(&config.dp, c4, &mut params, &mut rng);
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.check()?;
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("checkpoint carries unknown parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn has_decoder(&self) -> bool {
        self.config.mode.uses_dp()
    }

    /// Differentiable forward of the backbone and classifier on `[N, 3, H, W]` pairs.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, pre: Var<'t>, post: Var<'t>) -> Result<Forward<'t>> {
        let cfg = &self.config;
        let feat_d4 = match cfg.difference.placement {
            Placement::Early => {
                let x_d = difference::forward(b, &cfg.difference, pre, post)?;
                *encoder::forward(b, &cfg.encoder, x_d)?.last().expect("four stages")
            }
            Placement::Late => {
                // the same binder hands out the same leaves, so both streams share weights
                let f_pre = *encoder::forward(b, &cfg.encoder, pre)?.last().expect("four stages");
                let f_post = *encoder::forward(b, &cfg.encoder, post)?.last().expect("four stages");
                difference::forward(b, &cfg.difference, f_pre, f_post)?
            }
        };
        let (p_cls, raw_cam) = cam::classify_var(b, feat_d4);
        Ok(Forward {
            feat_d4,
            p_cls,
            raw_cam,
        })
    }

    /// Decoder on top of [`Forward::feat_d4`].
    pub fn decode_var<'t>(
        &self,
        b: &Binder<'t, '_>,
        feat_d4: Var<'t>,
        out_size: (usize, usize),
    ) -> Result<(Var<'t>, Var<'t>)> {
        if !self.has_decoder() {
            return Err(Error::Config(format!("mode {} has no decoder", self.config.mode)));
        }
        decoder::forward(b, &self.config.dp, feat_d4, out_size)
    }

    fn check_pair(pre: &Tensor, post: &Tensor) -> Result<()> {
        if pre.shape() != post.shape() {
            return Err(Error::ShapeMismatch(format!(
                "pre {:?} vs post {:?}",
                pre.shape(),
                post.shape()
            )));
        }
        if pre.shape().len() != 4 || pre.shape()[1] != 3 {
            return Err(Error::Dimension(format!("expected [N, 3, H, W], got {:?}", pre.shape())));
        }
        let (_, _, h, w) = pre.dims4();
        encoder::check_input_size(h, w)
    }

    /// Inference pass at the given resolution: `(p_cls [N], raw_cam, feat_d4)`.
    pub fn run(&self, pre: &Tensor, post: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        Self::check_pair(pre, post)?;
        let tape = Tape::inference();
        let b = Binder::new(&tape, &self.params);
        let out = self.forward(&b, tape.constant(pre.clone()), tape.constant(post.clone()))?;
        Ok((
            (*out.p_cls.value()).clone(),
            (*out.raw_cam.value()).clone(),
            (*out.feat_d4.value()).clone(),
        ))
    }

    /// Fused multi-scale CAM, `[N, 1, H, W]` with values in `[0, 1)`.
    pub fn multiscale_cam(&self, pre: &Tensor, post: &Tensor) -> Result<Tensor> {
        self.multiscale_cam_reusing(pre, post, None)
    }

    /// As [`Model::multiscale_cam`], taking the unit-scale raw CAM from
    /// `unit_scale` when the caller already has it.
    pub fn multiscale_cam_reusing(&self, pre: &Tensor, post: &Tensor, unit_scale: Option<&Tensor>) -> Result<Tensor> {
        Self::check_pair(pre, post)?;
        let c = &self.config.cam;
        cam::fuse_multiscale(pre, post, &c.scales, c.eps_norm, |a, b| match unit_scale {
            Some(raw) if a.shape() == pre.shape() => Ok(raw.clone()),
            _ => Ok(self.run(a, b)?.1),
        })
    }

    /// Thresholded multi-scale CAM per sample.
    pub fn pred_init(&self, pre: &Tensor, post: &Tensor) -> Result<Vec<ChangeMask>> {
        let fused = self.multiscale_cam(pre, post)?;
        masks_from_cam(&fused, &self.config.cam)
    }

    pub fn predict(&self, pre: &Tensor, post: &Tensor) -> Result<Prediction> {
        let (_, _, h, w) = pre.dims4();
        let (p_cls, _, feat_d4) = self.run(pre, post)?;
        let cam = self.multiscale_cam(pre, post)?;
        let pred_init = masks_from_cam(&cam, &self.config.cam)?;
        let (p_dp, pred_final) = if self.has_decoder() {
            let (_, logits) = decoder::decode(&feat_d4, &self.config.dp, &self.params, (h, w))?;
            let masks = (0..logits.shape()[0])
                .map(|i| decoder::predict_final(&logits.sample(i)))
                .collect();
            (Some(logits), Some(masks))
        } else {
            (None, None)
        };
        Ok(Prediction {
            p_cls: p_cls.into_data(),
            cam,
            pred_init,
            p_dp,
            pred_final,
        })
    }
}

/// Split a fused `[N, 1, H, W]` CAM batch and threshold each sample at `tau`.
pub fn masks_from_cam(fused: &Tensor, cfg: &CamConfig) -> Result<Vec<ChangeMask>> {
    cam::split_cams(fused, &cfg.scales)
        .iter()
        .map(|c| cam::predict_initial(c, cfg.tau))
        .collect()
}
