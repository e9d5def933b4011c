//! Browser demo bindings.
//!
//! Three operations are exported: render a synthetic image pair with its
//! change mask, trace the learning-rate schedule, and show which offsets the
//! dilated decoder branches read from.

use wasm_bindgen::prelude::*;

use wscd::data::{generate_synthetic, SynthSpec};
use wscd::decoder::DilationConfig;
use wscd::harness::{lr_at, ParamGroup, TrainConfig};
use wscd::Tensor;

fn rgba_from_planes(img: &Tensor) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(4 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// RGBA bytes of the pre image, post image and change mask, concatenated.
/// Each part is `size * size * 4` bytes.
#[wasm_bindgen]
pub fn synth_pair(seed: u64, size: usize, changed: bool) -> Result<Vec<u8>, String> {
    let spec = SynthSpec {
        num_pairs: 1,
        size,
        changed_ratio: if changed { 1.0 } else { 0.0 },
        seed,
        ..SynthSpec::default()
    };
    let pair = generate_synthetic(&spec)
        .map_err(|e| e.to_string())?
        .pop()
        .expect("one pair requested");
    let mut out = rgba_from_planes(&pair.pre);
    out.extend(rgba_from_planes(&pair.post));
    let gt = pair.gt.expect("generated pairs carry masks");
    for &v in gt.data() {
        let g = if v == 1 { 255 } else { 0 };
        out.extend([g, g, g, 255]);
    }
    Ok(out)
}

/// Backbone learning rate at every iteration in `0..=max_iterations`, sampled
/// at `points` evenly spaced iterations.
#[wasm_bindgen]
pub fn lr_curve(
    base_lr: f64,
    warmup: u64,
    max_iterations: u64,
    power: f64,
    points: usize,
) -> Result<Vec<f64>, String> {
    let cfg = TrainConfig {
        base_lr,
        warmup_iterations: warmup,
        max_iterations,
        poly_power: power,
        ..TrainConfig::default()
    };
    cfg.check().map_err(|e| e.to_string())?;
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let it = (i as u64 * max_iterations) / (points as u64 - 1);
            lr_at(it, ParamGroup::Backbone, &cfg).map_err(|e| e.to_string())
        })
        .collect()
}

/// Footprint of the decoder branches on a `(2·radius+1)²` grid centred on
/// one output pixel: bit `b` of a cell is set when branch `b` reads that
/// offset. `rates` is a comma-separated list such as `0,1,2,3`.
#[wasm_bindgen]
pub fn dilation_footprint(rates: &str, radius: usize) -> Result<Vec<u32>, String> {
    let rates: Vec<usize> = rates
        .split(',')
        .map(|r| r.trim().parse().map_err(|_| format!("bad rate `{}`", r.trim())))
        .collect::<Result<_, _>>()?;
    let cfg = DilationConfig {
        rates,
        ..DilationConfig::default()
    };
    cfg.check().map_err(|e| e.to_string())?;
    if cfg.rates.len() > 32 {
        return Err("at most 32 branches".into());
    }
    let side = 2 * radius + 1;
    let mut grid = vec![0u32; side * side];
    for (b, &rate) in cfg.rates.iter().enumerate() {
        let (k, d) = DilationConfig::branch_kernel(rate);
        let half = (k / 2) as isize;
        for ky in -half..=half {
            for kx in -half..=half {
                let (dy, dx) = (ky * d as isize, kx * d as isize);
                if dy.unsigned_abs() <= radius && dx.unsigned_abs() <= radius {
                    let y = (dy + radius as isize) as usize;
                    let x = (dx + radius as isize) as usize;
                    grid[y * side + x] |= 1 << b;
                }
            }
        }
    }
    Ok(grid)
}
