//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of that scalar with respect to every leaf that influenced it.
//! Leaves that did not influence the root get no gradient at all, which the
//! optimizer relies on to leave untouched parameters alone.

use std::cell::RefCell;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;

use crate::tensor::{col2im, gemm, im2col, AxisTaps, ConvGeom, Tensor};

type Backward = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape for inference: values only, no backward closures kept.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (a parameter).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), Vec::new(), None, self.record)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), Vec::new(), None, false)
    }

    fn insert(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        backward: Option<Backward>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Record an op result. The closure maps the output gradient to one
    /// gradient per parent, in order.
    fn push<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor) -> Vec<Tensor> + 'static,
    {
        let requires = self.record && parents.iter().any(|p| self.requires_grad(p.id));
        let ids = parents.iter().map(|p| p.id).collect();
        if requires {
            self.insert(Rc::new(value), ids, Some(Box::new(backward)), true)
        } else {
            self.insert(Rc::new(value), ids, None, false)
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the scalar `root` with respect to every leaf it depends on.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of one logit against a {0,1} (or soft) target.
pub fn bce_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, value: Tensor, backward: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'t> {
        self.tape.push(value, &[self], move |g| vec![backward(g)])
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape
            .push(value, &[self, other], |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape
            .push(value, &[self, other], |g| vec![g.clone(), g.map(|v| -v)])
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = a.zip_map(&b, |x, y| x * y);
        self.tape.push(value, &[self, other], move |g| {
            vec![g.zip_map(&b, |g, y| g * y), g.zip_map(&a, |g, x| g * x)]
        })
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, mask: &Tensor) -> Var<'t> {
        let mask = Rc::new(mask.clone());
        let value = self.value().zip_map(&mask, |x, m| x * m);
        self.unary(value, move |g| g.zip_map(&mask, |g, m| g * m))
    }

    /// `offset + coeff ⊙ self`, with constant `offset` and `coeff`.
    pub fn affine_const(self, offset: &Tensor, coeff: &Tensor) -> Var<'t> {
        let coeff = Rc::new(coeff.clone());
        let scaled = self.value().zip_map(&coeff, |x, c| x * c);
        let value = scaled.zip_map(offset, |x, o| x + o);
        self.unary(value, move |g| g.zip_map(&coeff, |g, c| g * c))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let value = self.value().map(|v| v * s);
        self.unary(value, move |g| g.map(|v| v * s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let value = self.value().map(|v| v + s);
        self.unary(value, |g| g.clone())
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let value = x.map(|v| v.max(0.0));
        self.unary(value, move |g| g.zip_map(&x, |g, x| if x > 0.0 { g } else { 0.0 }))
    }

    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let value = x.map(f64::abs);
        self.unary(value, move |g| g.zip_map(&x, |g, x| g * x.signum()))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t> {
        let x = self.value();
        let value = x.map(gelu);
        self.unary(value, move |g| g.zip_map(&x, |g, x| g * gelu_grad(x)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = Rc::new(self.value().map(sigmoid));
        let out = Tensor::clone(&y);
        self.unary(out, move |g| g.zip_map(&y, |g, y| g * y * (1.0 - y)))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let in_shape = self.shape();
        let value = Tensor::clone(&self.value()).reshape(shape);
        self.unary(value, move |g| g.clone().reshape(&in_shape))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.sum() / n as f64);
        self.unary(value, move |g| Tensor::full(&shape, g.item() / n as f64))
    }

    /// `[N, C, H, W] -> [N, C]` spatial average.
    pub fn mean_spatial(self) -> Var<'t> {
        let (n, c, h, w) = self.value().dims4();
        let hw = h * w;
        let value = Tensor::new(
            &[n, c],
            self.value()
                .data()
                .chunks_exact(hw)
                .map(|p| p.iter().sum::<f64>() / hw as f64)
                .collect(),
        );
        self.unary(value, move |g| {
            let mut out = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                out.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            Tensor::new(&[n, c, h, w], out)
        })
    }

    /// Per-sample maximum over all non-batch dims, `[N, ...] -> [N]`.
    /// The gradient flows to the first maximising element only.
    pub fn max_per_sample(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = shape[0];
        let len = x.numel() / n;
        let mut arg = Vec::with_capacity(n);
        let mut vals = Vec::with_capacity(n);
        for (s, chunk) in x.data().chunks_exact(len).enumerate() {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = i;
                }
            }
            arg.push(s * len + best);
            vals.push(chunk[best]);
        }
        self.unary(Tensor::new(&[n], vals), move |g| {
            let mut out = Tensor::zeros(&shape);
            for (&i, &gv) in arg.iter().zip(g.data()) {
                out.data_mut()[i] = gv;
            }
            out
        })
    }

    /// Mean binary cross-entropy with logits against constant targets.
    pub fn bce_with_logits(self, targets: &Tensor) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape(), targets.shape(), "bce target shape mismatch");
        let n = x.numel() as f64;
        let loss = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| bce_logit(l, t))
            .sum::<f64>()
            / n;
        let targets = Rc::new(targets.clone());
        self.unary(Tensor::scalar(loss), move |g| {
            let gv = g.item() / n;
            x.zip_map(&targets, |l, t| gv * (sigmoid(l) - t))
        })
    }

    /// `x · Wᵀ + b` over the last dim: `x: [.., Cin]`, `w: [Cout, Cin]`, `b: [Cout]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let (cout, cin) = (w.shape()[0], w.shape()[1]);
        let xs = x.shape().to_vec();
        assert_eq!(*xs.last().unwrap(), cin, "linear: input dim mismatch");
        let rows = x.numel() / cin;
        let mut out = vec![0.0; rows * cout];
        gemm(rows, cin, cout, x.data(), false, w.data(), true, &mut out, false);
        if let Some(b) = bias {
            let b = b.value();
            for row in out.chunks_exact_mut(cout) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
        let mut os = xs.clone();
        *os.last_mut().unwrap() = cout;
        let parents: Vec<Var<'t>> = std::iter::once(self)
            .chain(std::iter::once(weight))
            .chain(bias)
            .collect();
        let has_bias = bias.is_some();
        self.tape.push(Tensor::new(&os, out), &parents, move |g| {
            let mut dx = vec![0.0; rows * cin];
            gemm(rows, cout, cin, g.data(), false, w.data(), false, &mut dx, false);
            let mut dw = vec![0.0; cout * cin];
            gemm(cout, rows, cin, g.data(), true, x.data(), false, &mut dw, false);
            let mut grads = vec![Tensor::new(&xs, dx), Tensor::new(&[cout, cin], dw)];
            if has_bias {
                let mut db = vec![0.0; cout];
                for row in g.data().chunks_exact(cout) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                grads.push(Tensor::new(&[cout], db));
            }
            grads
        })
    }

    /// Batched `[B, M, K] · [B, K, N]`, or `[B, M, K] · [B, N, K]ᵀ` when `transpose_rhs`.
    pub fn bmm(self, rhs: Var<'t>, transpose_rhs: bool) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = if transpose_rhs { b.shape()[1] } else { b.shape()[2] };
        assert_eq!(b.shape()[0], bs);
        assert_eq!(if transpose_rhs { b.shape()[2] } else { b.shape()[1] }, k);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                transpose_rhs,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let b_shape = b.shape().to_vec();
        self.tape
            .push(Tensor::new(&[bs, m, n], out), &[self, rhs], move |g| {
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &a.data()[i * m * k..(i + 1) * m * k];
                    let bi = &b.data()[i * k * n..(i + 1) * k * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if transpose_rhs {
                        // y = a bᵀ, b: n×k
                        gemm(m, n, k, gi, false, bi, false, dai, false);
                        gemm(n, m, k, gi, true, ai, false, dbi, false);
                    } else {
                        gemm(m, n, k, gi, false, bi, true, dai, false);
                        gemm(k, m, n, ai, true, gi, false, dbi, false);
                    }
                }
                vec![Tensor::new(&[bs, m, k], da), Tensor::new(&b_shape, db)]
            })
    }

    /// Softmax over the last dim.
    pub fn softmax_last(self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut y = x.data().to_vec();
        for row in y.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let y = Rc::new(Tensor::new(x.shape(), y));
        let out = Tensor::clone(&y);
        self.unary(out, move |g| {
            let mut dx = g.data().to_vec();
            for (drow, yrow) in dx.chunks_exact_mut(d).zip(y.data().chunks_exact(d)) {
                let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (dv, yv) in drow.iter_mut().zip(yrow) {
                    *dv = yv * (*dv - dot);
                }
            }
            Tensor::new(y.shape(), dx)
        })
    }

    /// Layer normalisation over the last dim with affine `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let d = *x.shape().last().unwrap();
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        self.tape
            .push(Tensor::new(&shape, out), &[self, gamma, beta], move |g| {
                let mut dx = vec![0.0; rows * d];
                let mut dg = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gm.data()[j];
                        mean_dh += dxhat[j];
                        mean_dh_h += dxhat[j] * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    Tensor::new(&shape, dx),
                    Tensor::new(&[d], dg),
                    Tensor::new(&[d], dbeta),
                ]
            })
    }

    /// `[N, C, H, W] -> [N, H·W, C]`.
    pub fn to_tokens(self) -> Var<'t> {
        let (n, c, h, w) = self.value().dims4();
        let value = permute_ncl(&self.value(), n, c, h * w, &[n, h * w, c]);
        self.unary(value, move |g| permute_ncl(g, n, h * w, c, &[n, c, h, w]))
    }

    /// `[N, H·W, C] -> [N, C, H, W]`.
    pub fn from_tokens(self, h: usize, w: usize) -> Var<'t> {
        let s = self.shape();
        let (n, l, c) = (s[0], s[1], s[2]);
        assert_eq!(l, h * w, "token count does not match {h}x{w}");
        let value = permute_ncl(&self.value(), n, l, c, &[n, c, h, w]);
        self.unary(value, move |g| permute_ncl(g, n, c, l, &[n, l, c]))
    }

    /// `[N, L, H·D] -> [N·H, L, D]`.
    pub fn split_heads(self, heads: usize) -> Var<'t> {
        let s = self.shape();
        let (n, l, c) = (s[0], s[1], s[2]);
        let d = c / heads;
        let value = heads_permute(&self.value(), n, l, heads, d, true);
        self.unary(value, move |g| heads_permute(g, n, l, heads, d, false))
    }

    /// `[N·H, L, D] -> [N, L, H·D]`.
    pub fn merge_heads(self, heads: usize) -> Var<'t> {
        let s = self.shape();
        let (nh, l, d) = (s[0], s[1], s[2]);
        let n = nh / heads;
        let value = heads_permute(&self.value(), n, l, heads, d, false);
        self.unary(value, move |g| heads_permute(g, n, l, heads, d, true))
    }

    /// Slice `[start, start + len)` of the last dim.
    pub fn narrow_last(self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().unwrap();
        assert!(start + len <= d);
        let rows = x.numel() / d;
        let mut out = Vec::with_capacity(rows * len);
        for row in x.data().chunks_exact(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut os = shape.clone();
        *os.last_mut().unwrap() = len;
        self.unary(Tensor::new(&os, out), move |g| {
            let mut dx = Tensor::zeros(&shape);
            for (drow, grow) in dx
                .data_mut()
                .chunks_exact_mut(d)
                .zip(g.data().chunks_exact(len))
            {
                drow[start..start + len].copy_from_slice(grow);
            }
            dx
        })
    }

    /// Concatenate NCHW tensors along channels.
    pub fn concat_channels(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, c, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat spatial mismatch");
                c
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (v, &c) in values.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        tape.push(Tensor::new(&[n, total, h, w], out), parts, move |g| {
            let mut grads: Vec<Vec<f64>> = chans.iter().map(|c| Vec::with_capacity(n * c * hw)).collect();
            for s in 0..n {
                let mut off = s * total * hw;
                for (gv, &c) in grads.iter_mut().zip(&chans) {
                    gv.extend_from_slice(&g.data()[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .map(|(gv, &c)| Tensor::new(&[n, c, h, w], gv))
                .collect()
        })
    }

    /// 2-D convolution, NCHW input and `[Cout, Cin, k, k]` weight.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeom) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let (n, cin, h, wd) = x.dims4();
        let (cout, wcin, kh, kw) = w.dims4();
        assert_eq!(wcin, cin, "conv2d: channel mismatch");
        assert_eq!((kh, kw), (geom.kernel, geom.kernel));
        let (ho, wo) = (geom.out_len(h), geom.out_len(wd));
        let ckk = cin * kh * kw;
        let pointwise = geom.kernel == 1 && geom.stride == 1 && geom.padding == 0;
        let record = self.tape.is_recording();
        let mut out = vec![0.0; n * cout * ho * wo];
        let mut saved_cols: Vec<Vec<f64>> = Vec::new();
        let mut cols = vec![0.0; if pointwise { 0 } else { ckk * ho * wo }];
        for s in 0..n {
            let xs = &x.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
            let col: &[f64] = if pointwise {
                xs
            } else {
                im2col(xs, cin, h, wd, geom, &mut cols);
                &cols
            };
            gemm(
                cout,
                ckk,
                ho * wo,
                w.data(),
                false,
                col,
                false,
                &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo],
                false,
            );
            if record && !pointwise {
                saved_cols.push(cols.clone());
            }
        }
        if let Some(b) = bias {
            let b = b.value();
            for (plane, bv) in out
                .chunks_exact_mut(ho * wo)
                .zip(b.data().iter().cycle())
            {
                for v in plane {
                    *v += bv;
                }
            }
        }
        let parents: Vec<Var<'t>> = [self, weight].into_iter().chain(bias).collect();
        let has_bias = bias.is_some();
        let w_shape = w.shape().to_vec();
        self.tape.push(
            Tensor::new(&[n, cout, ho, wo], out),
            &parents,
            move |g| {
                let mut dx = vec![0.0; n * cin * h * wd];
                let mut dw = vec![0.0; cout * ckk];
                let mut dcols = vec![0.0; ckk * ho * wo];
                for s in 0..n {
                    let gs = &g.data()[s * cout * ho * wo..(s + 1) * cout * ho * wo];
                    let col: &[f64] = if pointwise {
                        &x.data()[s * cin * h * wd..(s + 1) * cin * h * wd]
                    } else {
                        &saved_cols[s]
                    };
                    gemm(cout, ho * wo, ckk, gs, false, col, true, &mut dw, true);
                    let dxs = &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd];
                    if pointwise {
                        gemm(ckk, cout, ho * wo, w.data(), true, gs, false, dxs, false);
                    } else {
                        gemm(ckk, cout, ho * wo, w.data(), true, gs, false, &mut dcols, false);
                        col2im(&dcols, cin, h, wd, geom, dxs);
                    }
                }
                let mut grads = vec![
                    Tensor::new(&[n, cin, h, wd], dx),
                    Tensor::new(&w_shape, dw),
                ];
                if has_bias {
                    let mut db = vec![0.0; cout];
                    for (plane, c) in g.data().chunks_exact(ho * wo).zip((0..cout).cycle()) {
                        db[c] += plane.iter().sum::<f64>();
                    }
                    grads.push(Tensor::new(&[cout], db));
                }
                grads
            },
        )
    }

    /// Depthwise `k×k` convolution, stride 1, same padding: weight `[C, 1, k, k]`, bias `[C]`.
    pub fn depthwise_conv2d(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let (n, c, h, wd) = x.dims4();
        let k = w.shape()[2];
        assert_eq!(w.shape(), &[c, 1, k, k]);
        let taps = Taps::new(k, h, wd);
        let hw = h * wd;
        let mut out = Vec::with_capacity(x.numel());
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let plane = &x.data()[base..base + hw];
                let kern = &w.data()[ch * k * k..(ch + 1) * k * k];
                let start = out.len();
                out.resize(start + hw, b.data()[ch]);
                let dst = &mut out[start..];
                for t in &taps.list {
                    let kv = kern[t.index];
                    for oy in t.y0..t.y1 {
                        let iy = (oy as isize + t.dy) as usize;
                        let src = &plane[iy * wd + (t.x0 as isize + t.dx) as usize..][..t.x1 - t.x0];
                        let d = &mut dst[oy * wd + t.x0..oy * wd + t.x1];
                        for (o, v) in d.iter_mut().zip(src) {
                            *o += kv * v;
                        }
                    }
                }
            }
        }
        self.tape
            .push(Tensor::new(&[n, c, h, wd], out), &[self, weight, bias], move |g| {
                let mut dx = vec![0.0; n * c * hw];
                let mut dw = vec![0.0; c * k * k];
                let mut db = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let plane = &x.data()[base..base + hw];
                        let gp = &g.data()[base..base + hw];
                        let kern = &w.data()[ch * k * k..(ch + 1) * k * k];
                        let dxp = &mut dx[base..base + hw];
                        db[ch] += gp.iter().sum::<f64>();
                        for t in &taps.list {
                            let kv = kern[t.index];
                            let mut acc = 0.0;
                            for oy in t.y0..t.y1 {
                                let iy = (oy as isize + t.dy) as usize;
                                let xi = iy * wd + (t.x0 as isize + t.dx) as usize;
                                let gs = &gp[oy * wd + t.x0..oy * wd + t.x1];
                                let xs = &plane[xi..xi + (t.x1 - t.x0)];
                                for (gv, xv) in gs.iter().zip(xs) {
                                    acc += gv * xv;
                                }
                                let ds = &mut dxp[xi..xi + (t.x1 - t.x0)];
                                for (d, gv) in ds.iter_mut().zip(gs) {
                                    *d += gv * kv;
                                }
                            }
                            dw[ch * k * k + t.index] += acc;
                        }
                    }
                }
                vec![
                    Tensor::new(&[n, c, h, wd], dx),
                    Tensor::new(&[c, 1, k, k], dw),
                    Tensor::new(&[c], db),
                ]
            })
    }

    /// Bilinear resize (half-pixel centres, corners not aligned) of an NCHW tensor.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        if (h, w) == (out_h, out_w) {
            return self;
        }
        let value = crate::tensor::resize_bilinear(&x, out_h, out_w);
        let ty = AxisTaps::new(h, out_h);
        let tx = AxisTaps::new(w, out_w);
        self.unary(value, move |g| {
            let mut dx = vec![0.0; n * c * h * w];
            for (gp, dp) in g
                .data()
                .chunks_exact(out_h * out_w)
                .zip(dx.chunks_exact_mut(h * w))
            {
                for oy in 0..out_h {
                    let (r0, r1, fy) = (ty.lo[oy] * w, ty.hi[oy] * w, ty.frac[oy]);
                    for ox in 0..out_w {
                        let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                        let gv = gp[oy * out_w + ox];
                        dp[r0 + c0] += gv * (1.0 - fy) * (1.0 - fx);
                        dp[r0 + c1] += gv * (1.0 - fy) * fx;
                        dp[r1 + c0] += gv * fy * (1.0 - fx);
                        dp[r1 + c1] += gv * fy * fx;
                    }
                }
            }
            Tensor::new(&[n, c, h, w], dx)
        })
    }
}

/// Swap the middle and last axes of a `[n, a, b]` view.
fn permute_ncl(x: &Tensor, n: usize, a: usize, b: usize, out_shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; n * a * b];
    for s in 0..n {
        let src = &x.data()[s * a * b..(s + 1) * a * b];
        let dst = &mut out[s * a * b..(s + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// `[N, L, H, D] <-> [N, H, L, D]`.
fn heads_permute(x: &Tensor, n: usize, l: usize, heads: usize, d: usize, split: bool) -> Tensor {
    let mut out = vec![0.0; n * l * heads * d];
    for s in 0..n {
        for t in 0..l {
            for hd in 0..heads {
                let merged = ((s * l + t) * heads + hd) * d;
                let split_ix = ((s * heads + hd) * l + t) * d;
                let (src, dst) = if split { (merged, split_ix) } else { (split_ix, merged) };
                out[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
            }
        }
    }
    if split {
        Tensor::new(&[n * heads, l, d], out)
    } else {
        Tensor::new(&[n, l, heads * d], out)
    }
}

/// One kernel tap of a same-padded stride-1 convolution with the output rows
/// and columns for which its input sample lies inside the image.
struct Tap {
    index: usize,
    dy: isize,
    dx: isize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

struct Taps {
    list: Vec<Tap>,
}

impl Taps {
    fn new(k: usize, h: usize, w: usize) -> Self {
        let pad = (k / 2) as isize;
        let span = |d: isize, len: usize| {
            let lo = (-d).max(0) as usize;
            let hi = (len as isize - d).clamp(0, len as isize) as usize;
            (lo.min(hi), hi)
        };
        let mut list = Vec::with_capacity(k * k);
        for ky in 0..k {
            for kx in 0..k {
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (y0, y1) = span(dy, h);
                let (x0, x1) = span(dx, w);
                if y0 < y1 && x0 < x1 {
                    list.push(Tap { index: ky * k + kx, dy, dx, y0, y1, x0, x1 });
                }
            }
        }
        Self { list }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `f` at `x` for every element.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let scale = x.abs().max(y.abs()).max(0.1);
            assert!((x - y).abs() / scale < tol, "element {i}: {x} vs {y}");
        }
    }

    /// Check d(sum(op(x) ⊙ probe))/dx against central differences.
    fn check_unary(x: Tensor, op: impl Fn(Var<'_>) -> Var<'_>) {
        let probe_shape = {
            let tape = Tape::new();
            op(tape.leaf(x.clone())).shape()
        };
        let probe = rand_tensor(&probe_shape, 99);
        let eval = |t: &Tensor| {
            let tape = Tape::new();
            let y = op(tape.leaf(t.clone())).value();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let y = op(leaf);
        let probe_c = tape.constant(probe.clone());
        let loss = y.mul(probe_c).mean().scale(probe.numel() as f64);
        let grads = tape.backward(loss);
        let analytic = grads.get(leaf).unwrap().clone();
        assert_close(&analytic, &numeric_grad(&x, &eval), 1e-6);
    }

    #[test]
    fn elementwise_grads() {
        check_unary(rand_tensor(&[2, 3, 4], 1), |v| v.gelu());
        check_unary(rand_tensor(&[2, 3, 4], 2), |v| v.sigmoid());
        check_unary(rand_tensor(&[2, 3, 4], 3), |v| v.mul(v).scale(0.5).add_scalar(1.0));
        check_unary(rand_tensor(&[2, 5], 4), |v| v.softmax_last());
    }

    #[test]
    fn layer_norm_grad() {
        let tape = Tape::new();
        let gamma = rand_tensor(&[6], 7);
        let beta = rand_tensor(&[6], 8);
        let _ = &tape;
        check_unary(rand_tensor(&[3, 6], 5), move |v| {
            let t = v.tape();
            v.layer_norm(t.constant(gamma.clone()), t.constant(beta.clone()), 1e-6)
        });
    }

    #[test]
    fn conv_grads_all_geometries() {
        for (k, stride, pad, dil) in [(1, 1, 0, 1), (3, 1, 1, 1), (3, 1, 2, 2), (7, 4, 3, 1), (3, 2, 1, 1)] {
            let w = rand_tensor(&[4, 3, k, k], 11);
            let b = rand_tensor(&[4], 12);
            let geom = ConvGeom::new(k, stride, pad, dil);
            let (w2, b2) = (w.clone(), b.clone());
            check_unary(rand_tensor(&[2, 3, 8, 8], 13), move |v| {
                let t = v.tape();
                v.conv2d(t.constant(w2.clone()), Some(t.constant(b2.clone())), geom)
            });
            let x = rand_tensor(&[2, 3, 8, 8], 13);
            check_unary(w, move |wv| {
                let t = wv.tape();
                t.constant(x.clone()).conv2d(wv, Some(t.constant(b.clone())), geom)
            });
        }
    }

    #[test]
    fn depthwise_and_resize_grads() {
        let w = rand_tensor(&[3, 1, 3, 3], 21);
        let b = rand_tensor(&[3], 22);
        check_unary(rand_tensor(&[2, 3, 5, 4], 23), move |v| {
            let t = v.tape();
            v.depthwise_conv2d(t.constant(w.clone()), t.constant(b.clone()))
        });
        let x = rand_tensor(&[2, 3, 5, 4], 23);
        check_unary(rand_tensor(&[3, 1, 3, 3], 24), move |wv| {
            let t = wv.tape();
            t.constant(x.clone()).depthwise_conv2d(wv, t.constant(Tensor::zeros(&[3])))
        });
        check_unary(rand_tensor(&[1, 2, 3, 5], 25), |v| v.resize_bilinear(7, 4));
        check_unary(rand_tensor(&[1, 2, 6, 6], 26), |v| v.resize_bilinear(3, 4));
    }

    #[test]
    fn structural_grads() {
        check_unary(rand_tensor(&[2, 3, 2, 4], 31), |v| v.to_tokens());
        check_unary(rand_tensor(&[2, 8, 6], 32), |v| v.from_tokens(2, 4));
        check_unary(rand_tensor(&[2, 5, 6], 33), |v| v.split_heads(3));
        check_unary(rand_tensor(&[6, 5, 2], 34), |v| v.merge_heads(3));
        check_unary(rand_tensor(&[2, 5, 6], 35), |v| v.narrow_last(2, 3));
        check_unary(rand_tensor(&[2, 3, 2, 2], 36), |v| v.mean_spatial());
        check_unary(rand_tensor(&[2, 3, 2, 2], 37), |v| Var::concat_channels(&[v, v.scale(2.0)]));
    }

    #[test]
    fn matmul_grads() {
        let w = rand_tensor(&[5, 4], 41);
        let b = rand_tensor(&[5], 42);
        check_unary(rand_tensor(&[2, 3, 4], 43), move |v| {
            let t = v.tape();
            v.linear(t.constant(w.clone()), Some(t.constant(b.clone())))
        });
        let x = rand_tensor(&[2, 3, 4], 43);
        check_unary(rand_tensor(&[5, 4], 44), move |wv| {
            let t = wv.tape();
            t.constant(x.clone()).linear(wv, None)
        });
        let rhs = rand_tensor(&[2, 4, 3], 45);
        check_unary(rand_tensor(&[2, 5, 4], 46), move |v| {
            let t = v.tape();
            v.bmm(t.constant(rhs.clone()), false)
        });
        let lhs = rand_tensor(&[2, 5, 4], 47);
        check_unary(rand_tensor(&[2, 3, 4], 48), move |v| {
            let t = v.tape();
            t.constant(lhs.clone()).bmm(v, true)
        });
        let lhs2 = rand_tensor(&[2, 5, 4], 49);
        check_unary(rand_tensor(&[2, 4, 3], 50), move |v| {
            let t = v.tape();
            t.constant(lhs2.clone()).bmm(v, false)
        });
    }

    #[test]
    fn bce_and_max_grads() {
        let targets = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        check_unary(rand_tensor(&[2, 3], 51).map(|v| v * 4.0), move |v| v.bce_with_logits(&targets));
        check_unary(rand_tensor(&[3, 1, 2, 2], 52), |v| v.max_per_sample());
    }

    #[test]
    fn unreachable_leaves_get_no_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::scalar(3.0));
        let _unused = b.scale(4.0);
        let loss = a.mul(a);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().item(), 4.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn inference_tape_keeps_no_closures() {
        let tape = Tape::inference();
        let a = tape.leaf(Tensor::scalar(2.0));
        let loss = a.mul(a);
        assert_eq!(loss.value().item(), 4.0);
        assert!(tape.backward(loss).get(a).is_none());
    }

    #[test]
    fn stable_bce_limits() {
        assert!((bce_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_logit(20.0, 1.0) <= 1e-8);
        assert!(bce_logit(-800.0, 1.0).is_finite());
        assert!((softplus(-2.0) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
    }
}

