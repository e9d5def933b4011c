//! Dilated prior decoder.
//!
//! Parallel branches over `Feat_d4` (rate 0 is a 1x1 convolution, rate k a
//! 3x3 convolution with dilation k), each followed by ReLU and concatenated in
//! ascending-rate order. A 1x1 fusion convolution maps the concatenation to one
//! logit channel, which is bilinearly upsampled to input resolution.
//!
//! Supervision is gated by the image-level label: unchanged pairs are trained
//! toward an all-zero map, changed pairs toward the CAM pseudo label.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{bce_logit, Tape, Var};
use crate::cam::{ChangeMask, ImageLabel};
use crate::error::{Error, Result};
use crate::mask::{plane_dims, BinaryMask};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{ConvGeom, Tensor};

const PREFIX: &str = "dp";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilationConfig {
    pub rates: Vec<usize>,
    pub branch_channels: usize,
}

impl Default for DilationConfig {
    fn default() -> Self {
        Self {
            rates: vec![0, 1, 2, 3],
            branch_channels: 64,
        }
    }
}

impl DilationConfig {
    pub fn desk() -> Self {
        Self {
            branch_channels: 16,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::Config("dilation rates are empty".into()));
        }
        if self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "dilation rates must be ascending and unique, got {:?}",
                self.rates
            )));
        }
        if self.branch_channels == 0 {
            return Err(Error::Config("branch_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn num_branches(&self) -> usize {
        self.rates.len()
    }

    /// Channels of the concatenated branch output.
    pub fn feature_channels(&self) -> usize {
        self.rates.len() * self.branch_channels
    }

    /// `(kernel, dilation)` of the branch for `rate`.
    pub fn branch_kernel(rate: usize) -> (usize, usize) {
        if rate == 0 {
            (1, 1)
        } else {
            (3, rate)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    PriorAllZero,
    CamPseudoLabel,
}

/// Pixel target for the decoder, with where it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupervisionTarget {
    pub y_pp: BinaryMask,
    pub source: TargetSource,
}

/// Unchanged pairs get the all-zero prior regardless of `pred_init`.
pub fn select_target(label: ImageLabel, pred_init: &ChangeMask) -> SupervisionTarget {
    if label.is_changed() {
        SupervisionTarget {
            y_pp: pred_init.clone(),
            source: TargetSource::CamPseudoLabel,
        }
    } else {
        SupervisionTarget {
            y_pp: BinaryMask::zeros(pred_init.height(), pred_init.width()),
            source: TargetSource::PriorAllZero,
        }
    }
}

fn branch_name(rate: usize, what: &str) -> String {
    format!("{PREFIX}.rate{rate}.{what}")
}

pub fn init_params(cfg: &DilationConfig, in_channels: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let mut init = Init::new(rng);
    for &r in &cfg.rates {
        let (k, _) = DilationConfig::branch_kernel(r);
        store.insert(
            branch_name(r, "weight"),
            init.conv_fan_out(&[cfg.branch_channels, in_channels, k, k], 1),
        );
        store.insert(branch_name(r, "bias"), Tensor::zeros(&[cfg.branch_channels]));
    }
    store.insert(
        format!("{PREFIX}.fuse.weight"),
        init.uniform_fan_in(&[1, cfg.feature_channels(), 1, 1]),
    );
    store.insert(format!("{PREFIX}.fuse.bias"), Tensor::zeros(&[1]));
}

/// Decoder forward: `(feat_dp [N, B·bc, h, w], p_dp [N, 1, H, W])`.
pub fn forward<'t>(
    b: &Binder<'t, '_>,
    cfg: &DilationConfig,
    feat_d4: Var<'t>,
    out_size: (usize, usize),
) -> Result<(Var<'t>, Var<'t>)> {
    cfg.check()?;
    let branches: Vec<Var<'t>> = cfg
        .rates
        .iter()
        .map(|&r| {
            let (k, dil) = DilationConfig::branch_kernel(r);
            let pad = if k == 1 { 0 } else { dil };
            feat_d4
                .conv2d(
                    b.get(&branch_name(r, "weight")),
                    Some(b.get(&branch_name(r, "bias"))),
                    ConvGeom::new(k, 1, pad, dil),
                )
                .relu()
        })
        .collect();
    let feat_dp = Var::concat_channels(&branches);
    let low = feat_dp.conv2d(
        b.get(&format!("{PREFIX}.fuse.weight")),
        Some(b.get(&format!("{PREFIX}.fuse.bias"))),
        ConvGeom::new(1, 1, 0, 1),
    );
    let p_dp = low.resize_bilinear(out_size.0, out_size.1);
    Ok((feat_dp, p_dp))
}

/// Pure decoder evaluation.
pub fn decode(
    feat_d4: &Tensor,
    cfg: &DilationConfig,
    params: &ParamStore,
    out_size: (usize, usize),
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::inference();
    let b = Binder::new(&tape, params);
    let (f, p) = forward(&b, cfg, tape.constant(feat_d4.clone()), out_size)?;
    Ok(((*f.value()).clone(), (*p.value()).clone()))
}

/// Stack per-sample targets into a `[N, 1, H, W]` tensor.
pub fn targets_tensor(targets: &[SupervisionTarget]) -> Tensor {
    Tensor::stack(&targets.iter().map(|t| t.y_pp.to_tensor()).collect::<Vec<_>>())
}

/// Pixel-averaged (then batch-averaged) stable BCE against gated targets.
pub fn loss_cp<'t>(p_dp: Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    if p_dp.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            p_dp.shape(),
            targets.shape()
        )));
    }
    Ok(p_dp.bce_with_logits(targets))
}

/// Scalar loss for one `H × W` logit map.
pub fn loss_cp_value(p_dp: &Tensor, target: &SupervisionTarget) -> Result<f64> {
    let (h, w) = plane_dims(p_dp);
    if (h, w) != target.y_pp.dims() {
        return Err(Error::ShapeMismatch(format!(
            "logits {h}x{w} vs target {:?}",
            target.y_pp.dims()
        )));
    }
    let sum: f64 = p_dp
        .data()
        .iter()
        .zip(target.y_pp.data())
        .map(|(&l, &t)| bce_logit(l, f64::from(t)))
        .sum();
    Ok(sum / (h * w) as f64)
}

/// Changed where `σ(logit) >= 0.5`, i.e. `logit >= 0`.
pub fn predict_final(p_dp: &Tensor) -> ChangeMask {
    BinaryMask::threshold(p_dp, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store(cfg: &DilationConfig, cin: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(cfg, cin, &mut s, &mut ChaCha8Rng::seed_from_u64(4));
        s
    }

    #[test]
    fn config_validation() {
        assert!(DilationConfig::default().check().is_ok());
        let bad = |rates: Vec<usize>| DilationConfig {
            rates,
            branch_channels: 4,
        };
        assert!(bad(vec![]).check().is_err());
        assert!(bad(vec![0, 2, 1]).check().is_err());
        assert!(bad(vec![0, 1, 1]).check().is_err());
    }

    #[test]
    fn gating_examples() {
        let ones = BinaryMask::ones(4, 4);
        let t = select_target(ImageLabel::UNCHANGED, &ones);
        assert_eq!(t.source, TargetSource::PriorAllZero);
        assert_eq!(t.y_pp.count_ones(), 0);
        let m = BinaryMask::from_fn(4, 4, |y, x| y == x);
        let t = select_target(ImageLabel::CHANGED, &m);
        assert_eq!(t.source, TargetSource::CamPseudoLabel);
        assert_eq!(t.y_pp, m);
    }

    #[test]
    fn zero_branches_give_fusion_bias() {
        let cfg = DilationConfig {
            rates: vec![0, 1, 2, 3],
            branch_channels: 3,
        };
        let mut p = store(&cfg, 5);
        for (name, t) in p.iter_mut() {
            if name.starts_with("dp.rate") {
                t.data_mut().fill(0.0);
            }
        }
        p.get_mut("dp.fuse.bias").unwrap().data_mut()[0] = -0.7;
        let feat = Tensor::from_fn(&[1, 5, 2, 2], |i| i as f64 - 7.0);
        let (f, logits) = decode(&feat, &cfg, &p, (64, 64)).unwrap();
        assert_eq!(f.shape(), &[1, 12, 2, 2]);
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(logits.shape(), &[1, 1, 64, 64]);
        assert!(logits.data().iter().all(|&v| v == -0.7));
    }

    #[test]
    fn branch_count_law() {
        for rates in [vec![0, 1, 2, 3], vec![1, 2, 3, 4], vec![0, 2, 4, 8], vec![0]] {
            let cfg = DilationConfig {
                rates: rates.clone(),
                branch_channels: 6,
            };
            let p = store(&cfg, 4);
            let (f, _) = decode(&Tensor::ones(&[2, 4, 3, 3]), &cfg, &p, (96, 96)).unwrap();
            assert_eq!(f.shape()[1], rates.len() * 6);
        }
    }

    #[test]
    fn dilated_branch_impulse_footprint() {
        for k in 1..=4usize {
            let cfg = DilationConfig {
                rates: vec![k],
                branch_channels: 1,
            };
            let mut p = store(&cfg, 1);
            p.get_mut(&format!("dp.rate{k}.weight")).unwrap().data_mut().fill(1.0);
            let size = 2 * k + 7;
            let c = size / 2;
            let mut x = Tensor::zeros(&[1, 1, size, size]);
            x.data_mut()[c * size + c] = 1.0;
            let (f, _) = decode(&x, &cfg, &p, (size, size)).unwrap();
            // direct-convolution oracle: output is 1 exactly where the impulse
            // sits under one of the 9 dilated taps
            let mut rows = vec![];
            let mut cols = vec![];
            for y in 0..size {
                for xx in 0..size {
                    let hit = [-1i64, 0, 1].iter().any(|&ty| {
                        [-1i64, 0, 1].iter().any(|&tx| {
                            y as i64 + ty * k as i64 == c as i64 && xx as i64 + tx * k as i64 == c as i64
                        })
                    });
                    assert_eq!(f.data()[y * size + xx], if hit { 1.0 } else { 0.0 });
                    if hit {
                        rows.push(y);
                        cols.push(xx);
                    }
                }
            }
            let span = |v: &Vec<usize>| v.iter().max().unwrap() - v.iter().min().unwrap() + 1;
            assert_eq!(span(&rows), 2 * k + 1);
            assert_eq!(span(&cols), 2 * k + 1);
        }
    }

    #[test]
    fn loss_cp_examples() {
        use std::f64::consts::LN_2;
        let zero_t = SupervisionTarget {
            y_pp: BinaryMask::zeros(2, 2),
            source: TargetSource::PriorAllZero,
        };
        assert!((loss_cp_value(&Tensor::zeros(&[2, 2]), &zero_t).unwrap() - LN_2).abs() < 1e-12);
        assert!(loss_cp_value(&Tensor::full(&[2, 2], -20.0), &zero_t).unwrap() <= 1e-8);
        let t = SupervisionTarget {
            y_pp: BinaryMask::from_vec(2, 2, vec![1, 0, 0, 0]).unwrap(),
            source: TargetSource::CamPseudoLabel,
        };
        let logits = Tensor::new(&[2, 2], vec![2.0, -2.0, 0.0, 0.0]);
        // independent scalar oracle: -log σ(2), -log(1-σ(-2)), ln2, ln2
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let oracle = (-(sig(2.0)).ln() - (1.0 - sig(-2.0)).ln() + 2.0 * LN_2) / 4.0;
        let got = loss_cp_value(&logits, &t).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.4100).abs() < 5e-5);
        assert!(matches!(
            loss_cp_value(&Tensor::zeros(&[3, 2]), &t),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn predict_final_tie_is_changed() {
        assert_eq!(predict_final(&Tensor::full(&[3, 3], -1.0)).count_ones(), 0);
        assert_eq!(predict_final(&Tensor::full(&[3, 3], 1.0)).count_ones(), 9);
        assert_eq!(predict_final(&Tensor::zeros(&[1, 1])).data(), &[1]);
    }

    #[test]
    fn descent_step_reduces_loss() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut improved = 0;
        for _ in 0..100 {
            let logits = Tensor::from_fn(&[1, 1, 6, 6], |_| rng.random_range(-3.0..3.0));
            let target = Tensor::from_fn(&[1, 1, 6, 6], |_| f64::from(rng.random_bool(0.5) as u8));
            let tape = Tape::new();
            let x = tape.leaf(logits.clone());
            let loss = loss_cp(x, &target).unwrap();
            let before = loss.value().item();
            let g = tape.backward(loss).get(x).unwrap().clone();
            let stepped = logits.zip_map(&g, |l, g| l - 1e-2 * g);
            let tape2 = Tape::new();
            let after = loss_cp(tape2.leaf(stepped), &target).unwrap().value().item();
            if after < before {
                improved += 1;
            }
        }
        assert!(improved >= 99);
    }
}
