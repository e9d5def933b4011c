//! Label-gated penalty on change-status mispredictions.
//!
//! A changed pair whose prediction contains no changed pixel costs `alpha`;
//! an unchanged pair whose prediction contains any changed pixel costs
//! `alpha`; everything else costs nothing. The batch value is the mean.
//!
//! Presence is decided from the count of predicted changed pixels, never
//! from a sum of feature values, so the sign of the features cannot flip it.
//!
//! `Literal` mode is the piecewise-constant penalty itself and contributes no
//! gradient. `Smooth` mode replaces the presence bit with the largest pixel
//! probability `m`, giving `alpha·(1 − m)` for changed pairs and `alpha·m`
//! for unchanged ones.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cam::{ChangeMask, ImageLabel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LgMode {
    Literal,
    Smooth,
}

/// Which prediction feeds the changed mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Thresholded multi-scale CAM.
    Init,
    /// Decoder prediction.
    Final,
}

impl FromStr for LgMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "smooth" => Ok(Self::Smooth),
            _ => Err(Error::Config(format!("unknown lg.mode `{s}`"))),
        }
    }
}

impl fmt::Display for LgMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::Smooth => "smooth",
        })
    }
}

impl FromStr for MaskSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Self::Init),
            "final" => Ok(Self::Final),
            _ => Err(Error::Config(format!("unknown lg.mask_source `{s}`"))),
        }
    }
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Init => "init",
            Self::Final => "final",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgConfig {
    pub alpha: f64,
    pub mode: LgMode,
    pub mask_source: MaskSource,
}

impl Default for LgConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            mode: LgMode::Literal,
            mask_source: MaskSource::Final,
        }
    }
}

impl LgConfig {
    /// Defaults when the constraint is attached to the CAM-only model.
    pub fn for_cam_only() -> Self {
        Self {
            alpha: 0.5,
            mode: LgMode::Literal,
            mask_source: MaskSource::Init,
        }
    }

    pub fn check(&self) -> Result<()> {
        check_alpha(self.alpha)
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} must lie in [0, 1]")))
    }
}

/// Features restricted to the predicted changed pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangedMask {
    /// `[C, h, w]`
    pub m_c: Tensor,
    pub presence: bool,
}

/// Gate `feat` (`[C, h, w]` or `[1, C, h, w]`) with `pred`, resampled to the
/// feature grid by nearest neighbour. `presence` counts the predicted changed
/// pixels of `pred` itself.
pub fn changed_mask(pred: &ChangeMask, feat: &Tensor) -> Result<ChangedMask> {
    let s = feat.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "expected one [C, h, w] feature map, got {s:?}"
            )))
        }
    };
    let gate = pred.resize_nearest(h, w);
    if gate.dims() != (h, w) {
        return Err(Error::ShapeMismatch("mask resample failed".into()));
    }
    let mut m_c = feat.clone().reshape(&[c, h, w]);
    for plane in m_c.data_mut().chunks_exact_mut(h * w) {
        for (v, &g) in plane.iter_mut().zip(gate.data()) {
            if g == 0 {
                *v = 0.0;
            }
        }
    }
    let presence = pred.any();
    if !presence {
        m_c.data_mut().fill(0.0);
    }
    Ok(ChangedMask { m_c, presence })
}

/// Per-sample literal penalty: `alpha` when the presence bit contradicts the label.
pub fn sample_penalty(label: ImageLabel, presence: bool, alpha: f64) -> f64 {
    if label.is_changed() {
        // l_c = α·δ[no changed pixel]
        if presence {
            0.0
        } else {
            alpha
        }
    } else if presence {
        // l_uc = α·(1 − δ[no changed pixel])
        alpha
    } else {
        0.0
    }
}

/// Batch mean of [`sample_penalty`].
pub fn literal_penalty(labels: &[ImageLabel], presence: &[bool], alpha: f64) -> f64 {
    assert_eq!(labels.len(), presence.len());
    assert!(!labels.is_empty());
    labels
        .iter()
        .zip(presence)
        .map(|(&l, &p)| sample_penalty(l, p, alpha))
        .sum::<f64>()
        / labels.len() as f64
}

/// Batch penalty on the tape.
///
/// `logits` is `[N, 1, H, W]` and only read in smooth mode. Literal mode (and
/// `alpha = 0`) yields a constant that carries no gradient.
pub fn penalty<'t>(
    tape: &'t Tape,
    labels: &[ImageLabel],
    masks: &[ChangedMask],
    cfg: &LgConfig,
    logits: Option<Var<'t>>,
) -> Result<Var<'t>> {
    cfg.check()?;
    if labels.len() != masks.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} masks",
            labels.len(),
            masks.len()
        )));
    }
    let n = labels.len();
    if cfg.alpha == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    match cfg.mode {
        LgMode::Literal => {
            let presence: Vec<bool> = masks.iter().map(|m| m.presence).collect();
            Ok(tape.constant(Tensor::scalar(literal_penalty(labels, &presence, cfg.alpha))))
        }
        LgMode::Smooth => {
            let logits = logits.ok_or_else(|| {
                Error::Config("smooth LG penalty needs the prediction logits".into())
            })?;
            if logits.shape()[0] != n {
                return Err(Error::ShapeMismatch("logit batch size".into()));
            }
            Ok(smooth_penalty(logits, labels, cfg.alpha))
        }
    }
}

/// `alpha·(1 − m)` for changed, `alpha·m` for unchanged, `m = max σ(logits)` per sample.
pub fn smooth_penalty<'t>(logits: Var<'t>, labels: &[ImageLabel], alpha: f64) -> Var<'t> {
    let n = labels.len();
    let m = logits.sigmoid().max_per_sample();
    let offset = Tensor::new(
        &[n],
        labels.iter().map(|l| if l.is_changed() { alpha } else { 0.0 }).collect(),
    );
    let coeff = Tensor::new(
        &[n],
        labels.iter().map(|l| if l.is_changed() { -alpha } else { alpha }).collect(),
    );
    m.affine_const(&offset, &coeff).mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;

    const C: ImageLabel = ImageLabel::CHANGED;
    const U: ImageLabel = ImageLabel::UNCHANGED;

    #[test]
    fn truth_table() {
        assert_eq!(sample_penalty(C, false, 0.2), 0.2);
        assert_eq!(sample_penalty(C, true, 0.2), 0.0);
        assert_eq!(sample_penalty(U, false, 0.2), 0.0);
        assert_eq!(sample_penalty(U, true, 0.2), 0.2);
        assert_eq!(literal_penalty(&[C, U], &[false, false], 0.5), 0.25);
    }

    #[test]
    fn changed_mask_cases() {
        let feat = Tensor::from_fn(&[2, 2, 2], |i| i as f64 + 1.0);
        let none = changed_mask(&BinaryMask::zeros(64, 64), &feat).unwrap();
        assert!(!none.presence);
        assert!(none.m_c.data().iter().all(|&v| v == 0.0));
        let all = changed_mask(&BinaryMask::ones(64, 64), &feat).unwrap();
        assert!(all.presence);
        assert_eq!(all.m_c, feat);
        let mut single = BinaryMask::zeros(2, 2);
        single.set(0, 0, true);
        let one = changed_mask(&single, &feat).unwrap();
        assert!(one.presence);
        for c in 0..2 {
            for i in 0..4 {
                let v = one.m_c.data()[c * 4 + i];
                assert_eq!(v != 0.0, i == 0);
            }
        }
    }

    #[test]
    fn presence_ignores_feature_sign() {
        let feat = Tensor::from_fn(&[3, 2, 2], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let neg = feat.map(|v| -v);
        let pred = BinaryMask::from_fn(2, 2, |y, x| y == 0 && x < 2);
        for label in [C, U] {
            let a = changed_mask(&pred, &feat).unwrap();
            let b = changed_mask(&pred, &neg).unwrap();
            // the gated features sum to zero here, yet presence stays true
            assert_eq!(a.m_c.sum(), 0.0);
            assert_eq!(sample_penalty(label, a.presence, 0.3), sample_penalty(label, b.presence, 0.3));
            assert!(a.presence);
        }
    }

    #[test]
    fn alpha_bounds() {
        assert!(check_alpha(0.0).is_ok());
        assert!(check_alpha(1.0).is_ok());
        assert!(check_alpha(1.01).is_err());
        assert!(check_alpha(-0.1).is_err());
    }

    #[test]
    fn literal_penalty_has_no_gradient() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let masks = vec![changed_mask(&BinaryMask::zeros(2, 2), &Tensor::ones(&[1, 2, 2])).unwrap()];
        let cfg = LgConfig::default();
        let p = penalty(&tape, &[C], &masks, &cfg, Some(logits)).unwrap();
        assert_eq!(p.value().item(), 0.2);
        let total = logits.mean().add(p);
        let g = tape.backward(total);
        assert!(g.get(logits).is_some());
        let tape2 = Tape::new();
        let l2 = tape2.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let p2 = penalty(&tape2, &[C], &masks, &cfg, Some(l2)).unwrap();
        assert!(tape2.backward(p2).get(l2).is_none());
    }

    #[test]
    fn smooth_penalty_values() {
        let tape = Tape::new();
        // sample 0 (changed): max logit 0 -> m = 0.5; sample 1 (unchanged): max logit 0 -> m = 0.5
        let logits = tape.leaf(Tensor::new(&[2, 1, 1, 2], vec![-1.0, 0.0, -3.0, 0.0]));
        let p = smooth_penalty(logits, &[C, U], 0.4);
        assert!((p.value().item() - (0.4 * 0.5 + 0.4 * 0.5) / 2.0).abs() < 1e-12);
    }
}
