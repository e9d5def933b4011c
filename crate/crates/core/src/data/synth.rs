use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImagePair;
use crate::cam::ImageLabel;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::rng::derived_rng;
use crate::tensor::{resize_bilinear, Tensor};

const STREAM_ASSIGN: u64 = 0xA551;
const STREAM_PAIR: u64 = 0x9A12;
const MAX_BRIGHTNESS_SHIFT: f64 = 0.05;
const MAX_NOISE_STD: f64 = 0.02;
const PERSISTENT_OBJECTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_pairs: usize,
    pub size: usize,
    pub changed_ratio: f64,
    pub seed: u64,
    pub max_objects: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_pairs: 128,
            size: 64,
            changed_ratio: 0.5,
            seed: 0,
            max_objects: 3,
        }
    }
}

impl SynthSpec {
    pub fn check(&self) -> Result<()> {
        if self.num_pairs == 0 {
            return Err(Error::Config("num_pairs must be positive".into()));
        }
        if self.size == 0 || self.size % 32 != 0 {
            return Err(Error::Config(format!("size {} must be a positive multiple of 32", self.size)));
        }
        if !(0.0..=1.0).contains(&self.changed_ratio) {
            return Err(Error::Config(format!(
                "changed_ratio {} must lie in [0, 1]",
                self.changed_ratio
            )));
        }
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    color: [f64; 3],
}

impl Rect {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let lo = (size / 4).max(1);
        let hi = (size / 2).max(lo);
        let h = rng.random_range(lo..=hi);
        let w = rng.random_range(lo..=hi);
        let color = std::array::from_fn(|_| {
            let v = rng.random_range(0.0..0.1);
            if rng.random_bool(0.5) {
                v
            } else {
                1.0 - v
            }
        });
        Self {
            y: rng.random_range(0..=size - h),
            x: rng.random_range(0..=size - w),
            h,
            w,
            color,
        }
    }

    fn paint(&self, img: &mut Tensor) {
        let size = img.shape()[1];
        let data = img.data_mut();
        for (c, &v) in self.color.iter().enumerate() {
            for y in self.y..self.y + self.h {
                let row = (c * size + y) * size;
                data[row + self.x..row + self.x + self.w].fill(v);
            }
        }
    }
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let coarse = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.random_range(0.3..0.7));
    resize_bilinear(&coarse, size, size).reshape(&[3, size, size])
}

fn jitter(img: &Tensor, rng: &mut ChaCha8Rng, shift: f64) -> Tensor {
    let std = rng.random_range(0.0..=MAX_NOISE_STD);
    let noise = Normal::new(0.0, std).expect("finite std");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + shift + noise.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

fn render_pair(rng: &mut ChaCha8Rng, size: usize, changed: bool, max_objects: usize) -> (Tensor, Tensor, BinaryMask) {
    loop {
        let bg = background(rng, size);
        let mut pre = bg.clone();
        let persistent = rng.random_range(0..=PERSISTENT_OBJECTS);
        for _ in 0..persistent {
            Rect::random(rng, size).paint(&mut pre);
        }
        let mut post = pre.clone();
        if changed {
            let n = rng.random_range(1..=max_objects);
            for _ in 0..n {
                let r = Rect::random(rng, size);
                if rng.random_bool(0.5) {
                    r.paint(&mut post);
                } else {
                    // removed: present before, background showing after
                    r.paint(&mut pre);
                }
            }
        }
        let gt = BinaryMask::from_fn(size, size, |y, x| {
            (0..3).any(|c| {
                let i = (c * size + y) * size + x;
                pre.data()[i] != post.data()[i]
            })
        });
        if gt.any() == changed {
            return (pre, post, gt);
        }
    }
}

/// Deterministic synthetic pairs. Exactly `round(num_pairs · changed_ratio)`
/// pairs are changed; which ones is a seeded shuffle.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<ImagePair>> {
    spec.check()?;
    let n = spec.num_pairs;
    let n_changed = (n as f64 * spec.changed_ratio).round() as usize;
    let mut changed = vec![false; n];
    changed[..n_changed].fill(true);
    changed.shuffle(&mut derived_rng(spec.seed, STREAM_ASSIGN, 0));
    changed
        .iter()
        .enumerate()
        .map(|(i, &is_changed)| {
            let mut rng = derived_rng(spec.seed, STREAM_PAIR, i as u64);
            let (pre, post, gt) = render_pair(&mut rng, spec.size, is_changed, spec.max_objects);
            let shift = rng.random_range(-MAX_BRIGHTNESS_SHIFT..=MAX_BRIGHTNESS_SHIFT);
            let pre = jitter(&pre, &mut rng, 0.0);
            let post = jitter(&post, &mut rng, shift);
            ImagePair::new(
                format!("{i:05}"),
                pre,
                post,
                ImageLabel::from_changed(is_changed),
                Some(gt),
            )
        })
        .collect()
}

/// Pairs for one split of a generated dataset; each split uses its own seed stream.
pub fn generate_split(spec: &SynthSpec, split: super::Split) -> Result<Vec<ImagePair>> {
    let mut s = spec.clone();
    s.seed = crate::rng::derive_seed(spec.seed, 0x5711, split as u64);
    if split != super::Split::Train {
        s.num_pairs = (spec.num_pairs / 4).max(1);
    }
    generate_synthetic(&s)
}
