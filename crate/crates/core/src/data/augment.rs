//! Paired geometric augmentation: rescale, horizontal flip, then crop back to
//! a fixed size. One draw is applied to pre, post and ground truth alike.
//! Crops that reach outside the rescaled image read mirror-reflected pixels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_image_label, ImagePair};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{resize_bilinear, Tensor};

const MAX_RETRIES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub crop_size: usize,
}

impl AugmentConfig {
    pub fn new(crop_size: usize) -> Self {
        Self {
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
            crop_size,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config(format!(
                "augment scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip probability must lie in [0, 1]".into()));
        }
        if self.crop_size == 0 || self.crop_size % 32 != 0 {
            return Err(Error::Config(format!(
                "crop size {} must be a positive multiple of 32",
                self.crop_size
            )));
        }
        Ok(())
    }
}

/// One sampled transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    /// Size of the rescaled image.
    pub scaled: (usize, usize),
    pub flip: bool,
    /// Top-left corner of the crop in rescaled coordinates; negative reads reflected pixels.
    pub offset: (i64, i64),
}

fn offset_range(len: usize, crop: usize) -> (i64, i64) {
    let d = len as i64 - crop as i64;
    (d.min(0), d.max(0))
}

fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

impl AugmentDraw {
    pub fn identity(size: (usize, usize)) -> Self {
        Self {
            scaled: size,
            flip: false,
            offset: (0, 0),
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng, input: (usize, usize), cfg: &AugmentConfig) -> Self {
        let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
        let len = |l: usize| ((l as f64 * scale).round() as usize).max(1);
        let scaled = (len(input.0), len(input.1));
        let flip = rng.random_bool(cfg.flip_prob);
        let (y0, y1) = offset_range(scaled.0, cfg.crop_size);
        let (x0, x1) = offset_range(scaled.1, cfg.crop_size);
        Self {
            scaled,
            flip,
            offset: (rng.random_range(y0..=y1), rng.random_range(x0..=x1)),
        }
    }

    /// Whether every rescaled pixel lands inside the crop.
    pub fn keeps_everything(&self, crop: usize) -> bool {
        self.scaled.0 <= crop && self.scaled.1 <= crop
    }

    /// Source pixel in the rescaled image for output pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let sy = reflect(self.offset.0 + y as i64, self.scaled.0);
        let sx = reflect(self.offset.1 + x as i64, self.scaled.1);
        (sy, if self.flip { self.scaled.1 - 1 - sx } else { sx })
    }

    fn apply_image(&self, img: &Tensor, crop: usize) -> Tensor {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let scaled = if (h, w) == self.scaled {
            img.clone()
        } else {
            resize_bilinear(&img.clone().reshape(&[1, c, h, w]), self.scaled.0, self.scaled.1)
        };
        let src = scaled.data();
        let (sh, sw) = self.scaled;
        let mut out = vec![0.0; c * crop * crop];
        for y in 0..crop {
            for x in 0..crop {
                let (sy, sx) = self.source(y, x);
                for ch in 0..c {
                    out[(ch * crop + y) * crop + x] = src[(ch * sh + sy) * sw + sx].clamp(0.0, 1.0);
                }
            }
        }
        Tensor::new(&[c, crop, crop], out)
    }

    fn apply_mask(&self, gt: &BinaryMask, crop: usize) -> BinaryMask {
        let scaled = gt.resize_nearest(self.scaled.0, self.scaled.1);
        BinaryMask::from_fn(crop, crop, |y, x| {
            let (sy, sx) = self.source(y, x);
            scaled.get(sy, sx)
        })
    }

    /// Apply to a pair; the label is re-derived when ground truth is present.
    pub fn apply(&self, pair: &ImagePair, crop: usize) -> ImagePair {
        let gt = pair.gt.as_ref().map(|g| self.apply_mask(g, crop));
        ImagePair {
            id: pair.id.clone(),
            pre: self.apply_image(&pair.pre, crop),
            post: self.apply_image(&pair.post, crop),
            y_cls: gt.as_ref().map_or(pair.y_cls, derive_image_label),
            gt,
        }
    }
}

/// Draw and apply one transform.
///
/// A changed pair without ground truth only accepts draws that keep the whole
/// rescaled image; after a few failed draws it is resized to the crop instead.
pub fn augment(pair: &ImagePair, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> ImagePair {
    let dims = pair.dims();
    let crop = cfg.crop_size;
    let draw = if pair.gt.is_none() && pair.y_cls.is_changed() {
        (0..MAX_RETRIES)
            .map(|_| AugmentDraw::sample(rng, dims, cfg))
            .find(|d| d.keeps_everything(crop))
            .unwrap_or(AugmentDraw::identity((crop, crop)))
    } else {
        AugmentDraw::sample(rng, dims, cfg)
    };
    draw.apply(pair, crop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cam::ImageLabel;
    use rand::SeedableRng;

    fn ramp_pair(size: usize) -> ImagePair {
        let pre = Tensor::from_fn(&[3, size, size], |i| (i % (size * size)) as f64 / (size * size) as f64);
        let post = pre.map(|v| 1.0 - v);
        let gt = BinaryMask::from_fn(size, size, |y, x| y < 4 && x < 6);
        ImagePair::new("r", pre, post, ImageLabel::CHANGED, Some(gt)).unwrap()
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn identity_draw() {
        let p = ramp_pair(32);
        assert_eq!(AugmentDraw::identity((32, 32)).apply(&p, 32), p);
    }

    #[test]
    fn flip_twice_is_identity() {
        let p = ramp_pair(32);
        let flip = AugmentDraw {
            scaled: (32, 32),
            flip: true,
            offset: (0, 0),
        };
        let once = flip.apply(&p, 32);
        assert_ne!(once, p);
        assert_eq!(flip.apply(&once, 32), p);
    }

    #[test]
    fn label_follows_cropped_gt() {
        let p = ramp_pair(32);
        let away = AugmentDraw {
            scaled: (64, 64),
            flip: false,
            offset: (32, 32),
        };
        let out = away.apply(&p, 32);
        assert!(!out.gt.as_ref().unwrap().any());
        assert_eq!(out.y_cls, ImageLabel::UNCHANGED);
    }

    #[test]
    fn changed_pair_without_gt_keeps_its_change() {
        let mut p = ramp_pair(32);
        p.gt = None;
        let cfg = AugmentConfig::new(32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let out = augment(&p, &cfg, &mut rng);
            assert_eq!(out.y_cls, ImageLabel::CHANGED);
            assert_eq!(out.pre.shape(), &[3, 32, 32]);
        }
    }

    #[test]
    fn values_stay_in_range() {
        let p = ramp_pair(64);
        let cfg = AugmentConfig::new(64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = augment(&p, &cfg, &mut rng);
            assert!(out.pre.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(out.gt.as_ref().map(|g| g.any()), Some(out.y_cls.is_changed()));
        }
    }
}
