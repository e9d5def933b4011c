//! Upper bound on pixel F1 when change maps are predicted on a coarse grid.
//!
//! Each grid cell gets the exact fraction of changed ground-truth pixels it
//! covers. The map is shifted by a bias, bilinearly upsampled and thresholded
//! at zero, which is how a CAM at that feature resolution becomes a mask. No
//! model is involved, so the numbers are a ceiling for any feature stride.
//!
//! ```text
//! cargo run --release --example resolution_ceiling
//! ```

use wscd::data::{generate_split, Split, SynthSpec};
use wscd::metrics::{accumulate, finalize, ConfusionCounts};
use wscd::tensor::{resize_bilinear, Tensor};
use wscd::BinaryMask;

const SIZE: usize = 64;

fn main() -> wscd::Result<()> {
    let spec = SynthSpec {
        num_pairs: 128,
        size: SIZE,
        ..SynthSpec::default()
    };
    let pairs = generate_split(&spec, Split::Train)?;
    for grid in [2usize, 4, 8, 16] {
        let cell = SIZE / grid;
        let mut best = (0.0, 0.0);
        for bias in [0.2, 0.3, 0.4, 0.5] {
            let mut counts = ConfusionCounts::default();
            for gt in pairs.iter().filter_map(|p| p.gt.as_ref()) {
                let coverage = Tensor::from_fn(&[1, 1, grid, grid], |i| {
                    let (gy, gx) = (i / grid, i % grid);
                    let mut hits = 0;
                    for y in 0..cell {
                        for x in 0..cell {
                            hits += usize::from(gt.get(gy * cell + y, gx * cell + x));
                        }
                    }
                    hits as f64 / (cell * cell) as f64 - bias
                });
                let up = resize_bilinear(&coverage, SIZE, SIZE).reshape(&[SIZE, SIZE]);
                counts = accumulate(&BinaryMask::threshold(&up, 0.0), gt, counts)?;
            }
            let f1 = finalize(&counts)?.f1;
            if f1 > best.0 {
                best = (f1, bias);
            }
        }
        println!("grid {grid:>2}x{grid:<2} (stride {:>2}): best F1 {:.3} at bias {}", SIZE / grid, best.0, best.1);
    }
    Ok(())
}
