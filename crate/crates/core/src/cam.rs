//! Image-level change classification and class activation maps.
//!
//! The classifier is a 1x1 convolution to a single channel applied before
//! global average pooling, so the pre-pooling map *is* the CAM and its
//! spatial mean is exactly the classification logit.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{plane_dims, BinaryMask};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{resize_bilinear, ConvGeom, Tensor};

pub const DEFAULT_TAU: f64 = 0.45;
pub const DEFAULT_EPS_NORM: f64 = 1e-5;
pub const DEFAULT_SCALES: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

/// Image-level label: 1 = changed, 0 = unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ImageLabel(u8);

impl ImageLabel {
    pub const UNCHANGED: Self = Self(0);
    pub const CHANGED: Self = Self(1);

    pub fn from_changed(changed: bool) -> Self {
        Self(u8::from(changed))
    }

    pub fn is_changed(self) -> bool {
        self.0 == 1
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0)
    }
}

impl TryFrom<u8> for ImageLabel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 | 1 => Ok(Self(v)),
            _ => Err(Error::Label(format!("image label must be 0 or 1, got {v}"))),
        }
    }
}

impl From<ImageLabel> for u8 {
    fn from(l: ImageLabel) -> u8 {
        l.0
    }
}

impl fmt::Display for ImageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Normalised change evidence in `[0, 1)`, at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeCam {
    pub values: Tensor,
    pub scales: Vec<f64>,
}

pub type ChangeMask = BinaryMask;

/// Multi-scale CAM settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamConfig {
    pub scales: Vec<f64>,
    pub eps_norm: f64,
    pub tau: f64,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            eps_norm: DEFAULT_EPS_NORM,
            tau: DEFAULT_TAU,
        }
    }
}

impl CamConfig {
    pub fn check(&self) -> Result<()> {
        check_scales(&self.scales)?;
        check_tau(self.tau)?;
        if !(self.eps_norm > 0.0) {
            return Err(Error::Config("eps_norm must be positive".into()));
        }
        Ok(())
    }
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::Config("scale list is empty".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!("scale {s} must be positive")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("tau {tau} must lie in (0, 1)")))
    }
}

pub fn init_params(channels: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let mut init = Init::new(rng);
    store.insert("classifier.weight", init.uniform_fan_in(&[1, channels, 1, 1]));
    store.insert("classifier.bias", Tensor::zeros(&[1]));
}

/// Classifier on `Feat_d4`: returns `(p_cls [N], raw_cam [N, 1, h, w])`.
pub fn classify_var<'t>(b: &Binder<'t, '_>, feat_d4: Var<'t>) -> (Var<'t>, Var<'t>) {
    let raw_cam = feat_d4.conv2d(
        b.get("classifier.weight"),
        Some(b.get("classifier.bias")),
        ConvGeom::new(1, 1, 0, 1),
    );
    let n = raw_cam.shape()[0];
    let p_cls = raw_cam.mean_spatial().reshape(&[n]);
    (p_cls, raw_cam)
}

/// Pure classification of a `[N, C, h, w]` feature map.
pub fn classify(feat_d4: &Tensor, params: &ParamStore) -> Result<(Tensor, Tensor)> {
    if feat_d4.shape().len() != 4 {
        return Err(Error::ShapeMismatch(format!("expected NCHW, got {:?}", feat_d4.shape())));
    }
    let w = params
        .get("classifier.weight")
        .ok_or_else(|| Error::Config("missing classifier weights".into()))?;
    if w.shape()[1] != feat_d4.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "classifier expects {} channels, got {}",
            w.shape()[1],
            feat_d4.shape()[1]
        )));
    }
    let tape = Tape::inference();
    let b = Binder::new(&tape, params);
    let (p, cam) = classify_var(&b, tape.constant(feat_d4.clone()));
    Ok(((*p.value()).clone(), (*cam.value()).clone()))
}

/// Mean binary cross-entropy with logits over the batch.
pub fn loss_cc<'t>(p_cls: Var<'t>, labels: &[ImageLabel]) -> Var<'t> {
    let targets = Tensor::new(&[labels.len()], labels.iter().map(|l| l.as_f64()).collect());
    p_cls.bce_with_logits(&targets)
}

/// Scalar version of [`loss_cc`].
pub fn loss_cc_value(logits: &[f64], labels: &[ImageLabel]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    assert!(!logits.is_empty());
    logits
        .iter()
        .zip(labels)
        .map(|(&p, l)| crate::autograd::bce_logit(p, l.as_f64()))
        .sum::<f64>()
        / logits.len() as f64
}

/// Input side length used for scale `s`: the nearest multiple of 32 to `len · s`, at least 32.
pub fn scaled_len(len: usize, s: f64) -> usize {
    (((len as f64 * s) / 32.0).round() as usize).max(1) * 32
}

/// Sum per-scale raw CAMs (already at `H × W`), clamp at zero and divide by
/// the per-sample spatial max plus `eps_norm`.
pub fn normalize_cam_sum(sum: &Tensor, eps_norm: f64) -> Tensor {
    let (n, c, h, w) = sum.dims4();
    let mut out = sum.map(|v| v.max(0.0));
    for plane in out.data_mut().chunks_exact_mut(c * h * w) {
        let max = plane.iter().copied().fold(0.0, f64::max);
        let denom = max + eps_norm;
        for v in plane {
            *v /= denom;
        }
    }
    let _ = n;
    out
}

/// Multi-scale CAM fusion for a batch.
///
/// `raw_cam_at` runs the full model on a resized `(pre, post)` batch and
/// returns its `[N, 1, h, w]` raw CAM. Scales are summed in ascending order.
pub fn fuse_multiscale(
    pre: &Tensor,
    post: &Tensor,
    scales: &[f64],
    eps_norm: f64,
    mut raw_cam_at: impl FnMut(&Tensor, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    check_scales(scales)?;
    if pre.shape() != post.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pre {:?} vs post {:?}",
            pre.shape(),
            post.shape()
        )));
    }
    let (n, _, h, w) = pre.dims4();
    let mut ordered = scales.to_vec();
    ordered.sort_by(f64::total_cmp);
    let mut sum = Tensor::zeros(&[n, 1, h, w]);
    for s in ordered {
        let (sh, sw) = (scaled_len(h, s), scaled_len(w, s));
        let (pre_s, post_s) = if (sh, sw) == (h, w) {
            (pre.clone(), post.clone())
        } else {
            (resize_bilinear(pre, sh, sw), resize_bilinear(post, sh, sw))
        };
        let raw = raw_cam_at(&pre_s, &post_s)?;
        let (_, _, ch, cw) = raw.dims4();
        let back = if (ch, cw) == (h, w) {
            raw
        } else {
            resize_bilinear(&raw, h, w)
        };
        sum.add_assign(&back);
    }
    Ok(normalize_cam_sum(&sum, eps_norm))
}

/// Split a fused `[N, 1, H, W]` batch into per-sample [`ChangeCam`]s.
pub fn split_cams(fused: &Tensor, scales: &[f64]) -> Vec<ChangeCam> {
    let (n, _, h, w) = fused.dims4();
    (0..n)
        .map(|i| ChangeCam {
            values: fused.sample(i).reshape(&[h, w]),
            scales: scales.to_vec(),
        })
        .collect()
}

/// `mask(i, j) = 1` iff `cam(i, j) >= tau`.
pub fn predict_initial(cam: &ChangeCam, tau: f64) -> Result<ChangeMask> {
    check_tau(tau)?;
    let _ = plane_dims(&cam.values);
    Ok(BinaryMask::threshold(&cam.values, tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store(channels: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(channels, &mut s, &mut ChaCha8Rng::seed_from_u64(0));
        s
    }

    #[test]
    fn zero_classifier_gives_zero_cam() {
        let mut p = store(4);
        p.zero_all();
        let feat = Tensor::from_fn(&[1, 4, 2, 2], |i| i as f64);
        let (logit, cam) = classify(&feat, &p).unwrap();
        assert_eq!(logit.data(), &[0.0]);
        assert!(cam.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_channel_sum_oracle() {
        // ch1 = [[1,0],[0,1]], ch2 = [[0,1],[1,0]], W = (1, -1)
        let feat = Tensor::new(&[1, 2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let mut p = store(2);
        *p.get_mut("classifier.weight").unwrap() = Tensor::new(&[1, 2, 1, 1], vec![1.0, -1.0]);
        p.get_mut("classifier.bias").unwrap().data_mut()[0] = 0.0;
        let (logit, cam) = classify(&feat, &p).unwrap();
        let oracle: Vec<f64> = (0..4).map(|i| feat.data()[i] - feat.data()[4 + i]).collect();
        assert_eq!(cam.data(), oracle.as_slice());
        assert_eq!(logit.data(), &[0.0]);
    }

    #[test]
    fn constant_features_logit_is_weighted_sum() {
        let c = [0.5, -1.5, 2.0];
        let wv = [0.3, 0.2, -0.7];
        let feat = Tensor::from_fn(&[1, 3, 2, 3], |i| c[i / 6]);
        let mut p = store(3);
        *p.get_mut("classifier.weight").unwrap() = Tensor::new(&[1, 3, 1, 1], wv.to_vec());
        let (logit, _) = classify(&feat, &p).unwrap();
        let want: f64 = c.iter().zip(&wv).map(|(a, b)| a * b).sum();
        assert!((logit.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn loss_cc_examples() {
        use std::f64::consts::LN_2;
        assert!((loss_cc_value(&[0.0], &[ImageLabel::CHANGED]) - LN_2).abs() < 1e-12);
        let big = loss_cc_value(&[20.0], &[ImageLabel::CHANGED]);
        assert!(big <= 1e-8 && big > 0.0);
        assert!((big - 2.061e-9).abs() < 1e-11);
        let batch = loss_cc_value(&[0.0, 0.0], &[ImageLabel::CHANGED, ImageLabel::UNCHANGED]);
        assert!((batch - LN_2).abs() < 1e-12);
        let tape = Tape::new();
        let p = tape.leaf(Tensor::new(&[2], vec![0.0, 0.0]));
        let l = loss_cc(p, &[ImageLabel::CHANGED, ImageLabel::UNCHANGED]);
        assert!((l.value().item() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_scale_fusion_is_normalised_raw_cam() {
        let pre = Tensor::zeros(&[1, 3, 64, 64]);
        let raw = Tensor::from_fn(&[1, 1, 64, 64], |i| (i as f64 * 0.01).sin());
        let fused = fuse_multiscale(&pre, &pre, &[1.0], 1e-5, |_, _| Ok(raw.clone())).unwrap();
        let max = raw.max();
        for (f, r) in fused.data().iter().zip(raw.data()) {
            assert!((f - r.max(0.0) / (max + 1e-5)).abs() < 1e-15);
        }
        let top = fused.max();
        assert!((top - (1.0 - 1e-5 / (max + 1e-5))).abs() < 1e-12);
        assert!(top < 1.0);
    }

    #[test]
    fn zero_cam_fuses_to_zero() {
        let pre = Tensor::zeros(&[2, 3, 64, 64]);
        let fused = fuse_multiscale(&pre, &pre, &DEFAULT_SCALES, 1e-5, |x, _| {
            let (n, _, h, w) = x.dims4();
            Ok(Tensor::zeros(&[n, 1, h / 32, w / 32]))
        })
        .unwrap();
        assert!(fused.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_maps_at_every_scale_match_single_scale() {
        // a constant map resizes to itself exactly, so k copies sum to k·c and
        // the normalisation removes k up to eps
        let pre = Tensor::zeros(&[1, 3, 64, 64]);
        let raw_const = |x: &Tensor, _: &Tensor| {
            let (n, _, h, w) = x.dims4();
            Ok(Tensor::full(&[n, 1, h / 32, w / 32], 0.8))
        };
        let multi = fuse_multiscale(&pre, &pre, &DEFAULT_SCALES, 1e-5, raw_const).unwrap();
        let single = fuse_multiscale(&pre, &pre, &[1.0], 1e-5, raw_const).unwrap();
        let single_exact = 0.8 / (0.8 + 1e-5);
        let multi_exact = 3.2 / (3.2 + 1e-5);
        for (m, s) in multi.data().iter().zip(single.data()) {
            assert!((s - single_exact).abs() < 1e-15);
            assert!((m - multi_exact).abs() < 1e-15);
            assert!((m - s).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_scale_list_rejected() {
        let pre = Tensor::zeros(&[1, 3, 32, 32]);
        assert!(matches!(
            fuse_multiscale(&pre, &pre, &[], 1e-5, |_, _| unreachable!()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn predict_initial_cases() {
        let zero = ChangeCam {
            values: Tensor::zeros(&[4, 4]),
            scales: vec![1.0],
        };
        assert_eq!(predict_initial(&zero, 0.45).unwrap().count_ones(), 0);
        let mut v = Tensor::full(&[4, 4], 0.1);
        v.data_mut()[5] = 0.9;
        let one = ChangeCam {
            values: v,
            scales: vec![1.0],
        };
        let m = predict_initial(&one, DEFAULT_TAU).unwrap();
        assert_eq!(m.count_ones(), 1);
        assert!(m.get(1, 1));
        assert!(predict_initial(&one, 0.0).is_err());
        assert!(predict_initial(&one, 1.0).is_err());
    }

    #[test]
    fn binary_cam_thresholds_to_itself() {
        let mask = BinaryMask::from_fn(8, 8, |y, x| (y * 3 + x) % 5 == 0);
        let cam = ChangeCam {
            values: mask.to_tensor().reshape(&[8, 8]),
            scales: vec![1.0],
        };
        for tau in [0.1, 0.45, 0.99] {
            assert_eq!(predict_initial(&cam, tau).unwrap(), mask);
        }
    }

    #[test]
    fn scaled_lengths() {
        assert_eq!(scaled_len(64, 0.5), 32);
        assert_eq!(scaled_len(64, 1.5), 96);
        assert_eq!(scaled_len(256, 1.5), 384);
        assert_eq!(scaled_len(32, 0.5), 32);
        assert_eq!(scaled_len(96, 0.5), 64);
    }
}
