//! Dense row-major `f64` tensors and the raw kernels the autograd tape is built on.
//!
//! Image-like data is laid out NCHW. Token sequences are `[N, L, C]`.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self::new(
            &self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One sample of an NCHW batch, keeping a leading batch dim of 1.
    pub fn sample(&self, index: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(index < n);
        let len = c * h * w;
        Tensor::new(&[1, c, h, w], self.data[index * len..(index + 1) * len].to_vec())
    }

    /// Stack equally shaped `[1, C, H, W]` (or `[C, H, W]`) tensors into a batch.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let inner: Vec<usize> = match items[0].shape.len() {
            4 => items[0].shape[1..].to_vec(),
            _ => items[0].shape.clone(),
        };
        let mut data = Vec::with_capacity(items.len() * inner.iter().product::<usize>());
        for t in items {
            assert_eq!(t.numel(), inner.iter().product::<usize>(), "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(&shape, data)
    }
}

/// `c = a · b (+ c when accumulate)` for row-major `a: m×k`, `b: k×n`.
/// `trans_a` / `trans_b` read the stored matrix transposed (stored as k×m / n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly m*k, k*n and m*n elements and the strides
    // describe in-bounds row-/column-major views of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            dilation,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (len + 2 * self.padding - span) / self.stride + 1
    }
}

/// Unfold one `[C, H, W]` image into columns `[C·k·k, Ho·Wo]`.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a `[C, H, W]` image.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, x: &mut [f64]) {
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for one axis of a half-pixel-centred (corners not aligned) bilinear resize.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i0 == i1 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of every `[H, W]` plane in an NCHW tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for (plane, dst) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(out_h * out_w))
    {
        for oy in 0..out_h {
            let (r0, r1, fy) = (ty.lo[oy] * w, ty.hi[oy] * w, ty.frac[oy]);
            for ox in 0..out_w {
                let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = plane[r0 + c0] * (1.0 - fx) + plane[r0 + c1] * fx;
                let bot = plane[r1 + c0] * (1.0 - fx) + plane[r1 + c1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

/// Nearest-neighbour resize (source index `floor(o · in / out)`), used for binary masks.
pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let ys: Vec<usize> = (0..out_h).map(|o| (o * h / out_h).min(h - 1)).collect();
    let xs: Vec<usize> = (0..out_w).map(|o| (o * w / out_w).min(w - 1)).collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for &sy in &ys {
            for &sx in &xs {
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // transposed storage of both operands
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, false);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 5, 6);
        let g = ConvGeom::new(3, 2, 2, 2);
        let (ho, wo) = (g.out_len(h), g.out_len(w));
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..c * 9 * ho * wo).map(|i| (i as f64 * 0.11).sin()).collect();
        let mut cols = vec![0.0; c * 9 * ho * wo];
        im2col(&x, c, h, w, g, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, h, w, g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64);
        assert_eq!(resize_bilinear(&x, 4, 4), x);
        let c = Tensor::full(&[1, 1, 2, 2], 0.3);
        let up = resize_bilinear(&c, 64, 64);
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn bilinear_upsample_by_two_matches_half_pixel_rule() {
        // 1-D profile [0, 1] upsampled to 4: sources -0.25, 0.25, 0.75, 1.25
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]);
        let up = resize_bilinear(&x, 1, 4);
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn nearest_downsample_picks_floor_index() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let d = resize_nearest(&x, 2, 2);
        assert_eq!(d.data(), &[0.0, 2.0, 8.0, 10.0]);
    }
}
