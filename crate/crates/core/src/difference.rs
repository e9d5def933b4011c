//! Bi-temporal fusion, either on the raw images before a single-stream encoder
//! or on the last-stage features of a weight-shared Siamese encoder.
//!
//! Paired inputs are concatenated along channels (pre first) and passed
//! through the selected convolution.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{ConvGeom, Tensor};

const PREFIX: &str = "difference";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Before the encoder (single stream).
    Early,
    /// After the last encoder stage (Siamese dual stream).
    Late,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifferenceKind {
    Conv1x1NoAct,
    Conv1x1Relu,
    AbsDiff,
    TwoLayerConv3x3,
    Conv3x3Relu,
}

impl DifferenceKind {
    pub const ALL: [DifferenceKind; 5] = [
        Self::Conv1x1NoAct,
        Self::Conv1x1Relu,
        Self::AbsDiff,
        Self::TwoLayerConv3x3,
        Self::Conv3x3Relu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conv1x1NoAct => "conv1x1_no_act",
            Self::Conv1x1Relu => "conv1x1_relu",
            Self::AbsDiff => "abs_diff",
            Self::TwoLayerConv3x3 => "two_layer_conv3x3",
            Self::Conv3x3Relu => "conv3x3_relu",
        }
    }

    pub fn has_relu(self) -> bool {
        matches!(self, Self::Conv1x1Relu | Self::TwoLayerConv3x3 | Self::Conv3x3Relu)
    }
}

impl fmt::Display for DifferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DifferenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown difference kind `{s}`")))
    }
}

/// A placement plus the fusion operator used there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifferenceVariant {
    pub placement: Placement,
    pub kind: DifferenceKind,
}

impl DifferenceVariant {
    /// Build a variant, rejecting combinations outside the supported table.
    pub fn new(placement: Placement, kind: DifferenceKind) -> Result<Self> {
        use DifferenceKind::*;
        let ok = match placement {
            Placement::Early => matches!(kind, Conv1x1NoAct | Conv1x1Relu | AbsDiff | TwoLayerConv3x3),
            Placement::Late => matches!(kind, Conv1x1Relu | Conv3x3Relu | TwoLayerConv3x3),
        };
        if ok {
            Ok(Self { placement, kind })
        } else {
            Err(Error::Config(format!(
                "difference `{kind}` is not available for {placement:?} placement"
            )))
        }
    }

    pub fn early_default() -> Self {
        Self {
            placement: Placement::Early,
            kind: DifferenceKind::Conv1x1NoAct,
        }
    }

    pub fn late_default() -> Self {
        Self {
            placement: Placement::Late,
            kind: DifferenceKind::Conv3x3Relu,
        }
    }

    /// Channels of each input and of the fused output.
    fn channels(&self, late_channels: usize) -> usize {
        match self.placement {
            Placement::Early => 3,
            Placement::Late => late_channels,
        }
    }
}

/// Create fusion parameters. `late_channels` is C4 and only used for late placement.
pub fn init_params(
    variant: &DifferenceVariant,
    late_channels: usize,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) {
    let c = variant.channels(late_channels);
    let mut init = Init::new(rng);
    let mut conv = |store: &mut ParamStore, tag: &str, cin: usize, k: usize| {
        store.insert(format!("{PREFIX}.{tag}.weight"), init.uniform_fan_in(&[c, cin, k, k]));
        store.insert(format!("{PREFIX}.{tag}.bias"), Tensor::zeros(&[c]));
    };
    match variant.kind {
        DifferenceKind::AbsDiff => {}
        DifferenceKind::Conv1x1NoAct | DifferenceKind::Conv1x1Relu => conv(store, "conv", 2 * c, 1),
        DifferenceKind::Conv3x3Relu => conv(store, "conv", 2 * c, 3),
        DifferenceKind::TwoLayerConv3x3 => {
            conv(store, "conv1", 2 * c, 3);
            conv(store, "conv2", c, 3);
        }
    }
}

fn conv<'t>(b: &Binder<'t, '_>, x: Var<'t>, tag: &str, k: usize) -> Var<'t> {
    x.conv2d(
        b.get(&format!("{PREFIX}.{tag}.weight")),
        Some(b.get(&format!("{PREFIX}.{tag}.bias"))),
        ConvGeom::new(k, 1, k / 2, 1),
    )
}

/// Fuse a pair of equally shaped NCHW maps.
pub fn forward<'t>(
    b: &Binder<'t, '_>,
    variant: &DifferenceVariant,
    pre: Var<'t>,
    post: Var<'t>,
) -> Result<Var<'t>> {
    if pre.shape() != post.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pre {:?} vs post {:?}",
            pre.shape(),
            post.shape()
        )));
    }
    if variant.placement == Placement::Early && pre.shape()[1] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "early difference expects 3-channel images, got {:?}",
            pre.shape()
        )));
    }
    let out = match variant.kind {
        DifferenceKind::AbsDiff => pre.sub(post).abs(),
        kind => {
            let pair = Var::concat_channels(&[pre, post]);
            match kind {
                DifferenceKind::Conv1x1NoAct => conv(b, pair, "conv", 1),
                DifferenceKind::Conv1x1Relu => conv(b, pair, "conv", 1).relu(),
                DifferenceKind::Conv3x3Relu => conv(b, pair, "conv", 3).relu(),
                DifferenceKind::TwoLayerConv3x3 => {
                    let first = conv(b, pair, "conv1", 3).relu();
                    conv(b, first, "conv2", 3).relu()
                }
                DifferenceKind::AbsDiff => unreachable!(),
            }
        }
    };
    Ok(out)
}

fn run(pre: &Tensor, post: &Tensor, variant: &DifferenceVariant, params: &ParamStore) -> Result<Tensor> {
    let tape = Tape::inference();
    let b = Binder::new(&tape, params);
    let out = forward(&b, variant, tape.constant(pre.clone()), tape.constant(post.clone()))?;
    Ok((*out.value()).clone())
}

/// Image-level fusion producing `x_d` with three channels.
pub fn diff_early(
    pre: &Tensor,
    post: &Tensor,
    variant: &DifferenceVariant,
    params: &ParamStore,
) -> Result<Tensor> {
    if variant.placement != Placement::Early {
        return Err(Error::Config("diff_early needs an early variant".into()));
    }
    run(pre, post, variant, params)
}

/// Feature-level fusion of two last-stage maps into `Feat_d4`.
pub fn diff_late(
    feat_pre: &Tensor,
    feat_post: &Tensor,
    variant: &DifferenceVariant,
    params: &ParamStore,
) -> Result<Tensor> {
    if variant.placement != Placement::Late {
        return Err(Error::Config("diff_late needs a late variant".into()));
    }
    run(feat_pre, feat_post, variant, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_for(variant: &DifferenceVariant, c4: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(variant, c4, &mut s, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    fn img(seed: u64, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + seed as f64) * 0.618).fract())
    }

    #[test]
    fn variant_table() {
        use DifferenceKind::*;
        for k in [Conv1x1NoAct, Conv1x1Relu, AbsDiff, TwoLayerConv3x3] {
            assert!(DifferenceVariant::new(Placement::Early, k).is_ok());
        }
        assert!(DifferenceVariant::new(Placement::Early, Conv3x3Relu).is_err());
        for k in [Conv1x1Relu, Conv3x3Relu, TwoLayerConv3x3] {
            assert!(DifferenceVariant::new(Placement::Late, k).is_ok());
        }
        assert!(DifferenceVariant::new(Placement::Late, Conv1x1NoAct).is_err());
        assert!(DifferenceVariant::new(Placement::Late, AbsDiff).is_err());
        assert_eq!("conv3x3_relu".parse::<DifferenceKind>().unwrap(), Conv3x3Relu);
    }

    #[test]
    fn abs_diff_cases() {
        let v = DifferenceVariant::new(Placement::Early, DifferenceKind::AbsDiff).unwrap();
        let p = ParamStore::new();
        let a = img(1, &[1, 3, 4, 4]);
        assert!(diff_early(&a, &a, &v, &p).unwrap().data().iter().all(|&x| x == 0.0));
        let pre = Tensor::full(&[1, 3, 1, 1], 0.2);
        let post = Tensor::full(&[1, 3, 1, 1], 0.7);
        let d = diff_early(&pre, &post, &v, &p).unwrap();
        assert!(d.data().iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn conv1x1_no_act_zero_weight_gives_bias() {
        let v = DifferenceVariant::early_default();
        let mut p = store_for(&v, 0, 1);
        p.get_mut("difference.conv.weight").unwrap().data_mut().fill(0.0);
        *p.get_mut("difference.conv.bias").unwrap() = Tensor::new(&[3], vec![0.1, -0.2, 0.3]);
        let d = diff_early(&img(1, &[1, 3, 4, 4]), &img(2, &[1, 3, 4, 4]), &v, &p).unwrap();
        for (c, want) in [0.1, -0.2, 0.3].into_iter().enumerate() {
            assert!(d.data()[c * 16..(c + 1) * 16].iter().all(|&x| x == want));
        }
    }

    #[test]
    fn conv1x1_no_act_is_affine() {
        // f(a+b) - f(a) - f(b) + f(0) = 0 on the concatenated input
        let v = DifferenceVariant::early_default();
        let p = store_for(&v, 0, 5);
        let shape = [1, 3, 8, 8];
        let (a1, a2) = (img(1, &shape), img(2, &shape));
        let (b1, b2) = (img(3, &shape), img(4, &shape));
        let z = Tensor::zeros(&shape);
        let sum = |x: &Tensor, y: &Tensor| x.zip_map(y, |a, b| a + b);
        let f_ab = diff_early(&sum(&a1, &b1), &sum(&a2, &b2), &v, &p).unwrap();
        let f_a = diff_early(&a1, &a2, &v, &p).unwrap();
        let f_b = diff_early(&b1, &b2, &v, &p).unwrap();
        let f_0 = diff_early(&z, &z, &v, &p).unwrap();
        for i in 0..f_ab.numel() {
            let r = f_ab.data()[i] - f_a.data()[i] - f_b.data()[i] + f_0.data()[i];
            assert!(r.abs() < 1e-6);
        }
    }

    #[test]
    fn late_relu_variants_non_negative_and_zero_weights() {
        for kind in [
            DifferenceKind::Conv1x1Relu,
            DifferenceKind::Conv3x3Relu,
            DifferenceKind::TwoLayerConv3x3,
        ] {
            let v = DifferenceVariant::new(Placement::Late, kind).unwrap();
            let p = store_for(&v, 8, 9);
            let fa = img(1, &[2, 8, 3, 3]).map(|x| x - 0.5);
            let fb = img(2, &[2, 8, 3, 3]).map(|x| 0.5 - x);
            let out = diff_late(&fa, &fb, &v, &p).unwrap();
            assert_eq!(out.shape(), &[2, 8, 3, 3]);
            assert!(out.min() >= 0.0);
        }
        let v = DifferenceVariant::late_default();
        let mut p = store_for(&v, 8, 9);
        p.zero_all();
        let out = diff_late(&img(1, &[1, 8, 2, 2]), &img(2, &[1, 8, 2, 2]), &v, &p).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn antisymmetric_kernel_cancels_identical_features() {
        // weights w[o, c] = K and w[o, C + c] = -K implement pre - post before the ReLU
        let c = 4;
        let v = DifferenceVariant::late_default();
        let mut p = store_for(&v, c, 3);
        let w = p.get("difference.conv.weight").unwrap().clone();
        let mut anti = w.clone();
        let per_in = 9;
        for o in 0..c {
            for ci in 0..c {
                for t in 0..per_in {
                    let src = w.data()[(o * 2 * c + ci) * per_in + t];
                    anti.data_mut()[(o * 2 * c + c + ci) * per_in + t] = -src;
                }
            }
        }
        *p.get_mut("difference.conv.weight").unwrap() = anti.clone();
        let feat = img(7, &[1, c, 3, 3]);
        // pre-activation by a direct convolution oracle
        let both = Tensor::stack(&[feat.clone()]);
        let mut pre_act = vec![0.0; c * 9];
        for o in 0..c {
            for y in 0..3i32 {
                for x in 0..3i32 {
                    let mut acc = 0.0;
                    for ci in 0..2 * c {
                        for ky in 0..3i32 {
                            for kx in 0..3i32 {
                                let (iy, ix) = (y + ky - 1, x + kx - 1);
                                if !(0..3).contains(&iy) || !(0..3).contains(&ix) {
                                    continue;
                                }
                                let src = both.data()[((ci % c) * 3 + iy as usize) * 3 + ix as usize];
                                acc += anti.data()[(o * 2 * c + ci) * 9 + (ky * 3 + kx) as usize] * src;
                            }
                        }
                    }
                    pre_act[(o * 3 + y as usize) * 3 + x as usize] = acc;
                }
            }
        }
        assert!(pre_act.iter().all(|v| v.abs() < 1e-12));
        let out = diff_late(&feat, &feat, &v, &p).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let v = DifferenceVariant::early_default();
        let p = store_for(&v, 0, 1);
        assert!(matches!(
            diff_early(&Tensor::zeros(&[1, 3, 4, 4]), &Tensor::zeros(&[1, 3, 4, 8]), &v, &p),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
