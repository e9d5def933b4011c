use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A binary `H × W` map. Used for change predictions and pixel ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    /// Build from 0/1 values; anything non-zero counts as 1.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    /// Threshold an `H × W` (or `[1, 1, H, W]`) tensor: 1 where `value >= threshold`.
    pub fn threshold(values: &Tensor, threshold: f64) -> Self {
        let (h, w) = plane_dims(values);
        Self {
            height: h,
            width: w,
            data: values.data().iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = u8::from(value);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    /// As a `[1, 1, H, W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// Nearest-neighbour resample (source index `floor(o · in / out)`).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut out = Vec::with_capacity(height * width);
        for oy in 0..height {
            let sy = (oy * self.height / height).min(self.height - 1);
            for ox in 0..width {
                let sx = (ox * self.width / width).min(self.width - 1);
                out.push(self.data[sy * self.width + sx]);
            }
        }
        Self {
            height,
            width,
            data: out,
        }
    }
}

/// `(H, W)` of a tensor holding a single plane.
pub(crate) fn plane_dims(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert!(s.len() >= 2, "expected a 2-D plane");
    assert_eq!(
        s[..s.len() - 2].iter().product::<usize>(),
        1,
        "expected a single plane, got {s:?}"
    );
    (s[s.len() - 2], s[s.len() - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_and_count() {
        let t = Tensor::new(&[2, 2], vec![0.1, 0.45, 0.9, 0.44]);
        let m = BinaryMask::threshold(&t, 0.45);
        assert_eq!(m.data(), &[0, 1, 1, 0]);
        assert_eq!(m.count_ones(), 2);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(BinaryMask::from_vec(2, 2, vec![1, 0, 0]).is_err());
        assert_eq!(BinaryMask::from_vec(1, 2, vec![0, 7]).unwrap().data(), &[0, 1]);
    }
}
