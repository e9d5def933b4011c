//! Four-stage hierarchical transformer encoder.
//!
//! Each stage embeds overlapping patches with a strided convolution (by
//! default stride 4 for the first stage, 2 afterwards), runs `depth` transformer blocks whose
//! self-attention attends to a spatially reduced key/value grid, and closes
//! with a layer norm. The feed-forward path mixes neighbouring tokens with a
//! depthwise 3x3 convolution, so no positional embedding is used.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{ConvGeom, Tensor};

pub const NUM_STAGES: usize = 4;
pub const DEFAULT_PATCH_STRIDES: [usize; NUM_STAGES] = [4, 2, 2, 2];
const LN_EPS: f64 = 1e-6;
const PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dims: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    pub heads: [usize; NUM_STAGES],
    pub mlp_ratio: f64,
    pub attention_reduction: [usize; NUM_STAGES],
    pub drop_rate: f64,
    #[serde(default = "default_strides")]
    pub patch_strides: [usize; NUM_STAGES],
}

fn default_strides() -> [usize; NUM_STAGES] {
    DEFAULT_PATCH_STRIDES
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Laptop-sized default.
    pub fn desk() -> Self {
        Self {
            embed_dims: [16, 32, 64, 128],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            mlp_ratio: 4.0,
            attention_reduction: [8, 4, 2, 1],
            drop_rate: 0.0,
            patch_strides: DEFAULT_PATCH_STRIDES,
        }
    }

    /// Smallest configuration, used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dims: [8, 16, 24, 32],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 3, 4],
            mlp_ratio: 2.0,
            attention_reduction: [8, 4, 2, 1],
            drop_rate: 0.0,
            patch_strides: DEFAULT_PATCH_STRIDES,
        }
    }

    /// Stage widths and depths of the MiT-B1 backbone.
    pub fn mit_b1_like() -> Self {
        Self {
            embed_dims: [64, 128, 320, 512],
            depths: [2, 2, 2, 2],
            heads: [1, 2, 5, 8],
            mlp_ratio: 4.0,
            attention_reduction: [8, 4, 2, 1],
            drop_rate: 0.0,
            patch_strides: DEFAULT_PATCH_STRIDES,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "mit-b1-like" => Ok(Self::mit_b1_like()),
            other => Err(Error::Config(format!("unknown encoder preset `{other}`"))),
        }
    }

    /// Check the structural invariants independent of input size.
    pub fn check(&self) -> Result<()> {
        for i in 0..NUM_STAGES {
            let (d, h) = (self.embed_dims[i], self.heads[i]);
            if d == 0 || h == 0 || self.depths[i] == 0 || self.attention_reduction[i] == 0 {
                return Err(Error::Config(format!("stage {i}: sizes must be positive")));
            }
            if d % h != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: {h} heads do not divide {d} channels"
                )));
            }
            if i > 0 && d < self.embed_dims[i - 1] {
                return Err(Error::Config(format!(
                    "embed_dims must be non-decreasing, got {:?}",
                    self.embed_dims
                )));
            }
        }
        if self.patch_strides.iter().any(|s| ![1, 2, 4].contains(s)) {
            return Err(Error::Config(format!(
                "patch strides must be 1, 2 or 4, got {:?}",
                self.patch_strides
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config("drop_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self, stage: usize) -> usize {
        ((self.embed_dims[stage] as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn last_dim(&self) -> usize {
        self.embed_dims[NUM_STAGES - 1]
    }

    /// Downsampling factor of stage `stage` relative to the input.
    pub fn reduction_at(&self, stage: usize) -> usize {
        self.patch_strides[..=stage].iter().product()
    }
}

/// Return `cfg` unchanged when it is valid for an `h × w` input.
pub fn validate_config(cfg: &EncoderConfig, input: (usize, usize)) -> Result<EncoderConfig> {
    check_input_size(input.0, input.1)?;
    cfg.check()?;
    Ok(cfg.clone())
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Dimension(format!(
            "input {h}x{w} must have both sides divisible by 32"
        )));
    }
    Ok(())
}

/// Spatial size of stage `stage` for an `h × w` input.
pub fn stage_size(cfg: &EncoderConfig, h: usize, w: usize, stage: usize) -> (usize, usize) {
    let f = cfg.reduction_at(stage);
    (h / f, w / f)
}

/// Encoder outputs, one NCHW map per stage (1/4, 1/8, 1/16 and 1/32 resolution
/// with the default strides).
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn last(&self) -> &Tensor {
        self.stages.last().expect("four stages")
    }
}

/// Overlapping patch embedding: 7x7 for stride 4, 3x3 for stride 2 or 1.
fn patch_geom(stride: usize) -> ConvGeom {
    let kernel = if stride == 4 { 7 } else { 3 };
    ConvGeom::new(kernel, stride, kernel / 2, 1)
}

fn name(parts: &[&str]) -> String {
    let mut s = String::from(PREFIX);
    for p in parts {
        s.push('.');
        s.push_str(p);
    }
    s
}

fn insert_norm(store: &mut ParamStore, base: &str, dim: usize) {
    store.insert(format!("{base}.weight"), Tensor::ones(&[dim]));
    store.insert(format!("{base}.bias"), Tensor::zeros(&[dim]));
}

fn insert_linear(store: &mut ParamStore, init: &mut Init<'_>, base: &str, cin: usize, cout: usize) {
    store.insert(format!("{base}.weight"), init.trunc_normal(&[cout, cin], 0.02));
    store.insert(format!("{base}.bias"), Tensor::zeros(&[cout]));
}

/// Create all encoder parameters (names under `encoder.`).
pub fn init_params(cfg: &EncoderConfig, in_channels: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let mut init = Init::new(rng);
    let mut cin = in_channels;
    for s in 0..NUM_STAGES {
        let c = cfg.embed_dims[s];
        let st = format!("stage{s}");
        let k = patch_geom(cfg.patch_strides[s]).kernel;
        store.insert(
            name(&[&st, "patch_embed", "proj", "weight"]),
            init.conv_fan_out(&[c, cin, k, k], 1),
        );
        store.insert(name(&[&st, "patch_embed", "proj", "bias"]), Tensor::zeros(&[c]));
        insert_norm(store, &name(&[&st, "patch_embed", "norm"]), c);
        let hidden = cfg.hidden_dim(s);
        let sr = cfg.attention_reduction[s];
        for b in 0..cfg.depths[s] {
            let blk = format!("block{b}");
            let base = |p: &str| name(&[&st, &blk, p]);
            insert_norm(store, &base("norm1"), c);
            insert_linear(store, &mut init, &base("attn.q"), c, c);
            insert_linear(store, &mut init, &base("attn.kv"), c, 2 * c);
            insert_linear(store, &mut init, &base("attn.proj"), c, c);
            if sr > 1 {
                store.insert(base("attn.sr.weight"), init.conv_fan_out(&[c, c, sr, sr], 1));
                store.insert(base("attn.sr.bias"), Tensor::zeros(&[c]));
                insert_norm(store, &base("attn.sr_norm"), c);
            }
            insert_norm(store, &base("norm2"), c);
            insert_linear(store, &mut init, &base("mlp.fc1"), c, hidden);
            store.insert(
                base("mlp.dwconv.weight"),
                init.conv_fan_out(&[hidden, 1, 3, 3], hidden),
            );
            store.insert(base("mlp.dwconv.bias"), Tensor::zeros(&[hidden]));
            insert_linear(store, &mut init, &base("mlp.fc2"), hidden, c);
        }
        insert_norm(store, &name(&[&st, "norm"]), c);
        cin = c;
    }
}

fn layer_norm<'t>(b: &Binder<'t, '_>, x: Var<'t>, base: &str) -> Var<'t> {
    x.layer_norm(b.get(&format!("{base}.weight")), b.get(&format!("{base}.bias")), LN_EPS)
}

fn linear<'t>(b: &Binder<'t, '_>, x: Var<'t>, base: &str) -> Var<'t> {
    x.linear(b.get(&format!("{base}.weight")), Some(b.get(&format!("{base}.bias"))))
}

/// Spatial-reduction multi-head self-attention on `[N, h·w, C]` tokens.
fn attention<'t>(
    b: &Binder<'t, '_>,
    x: Var<'t>,
    (h, w): (usize, usize),
    heads: usize,
    sr: usize,
    base: &str,
) -> Var<'t> {
    let c = *x.shape().last().unwrap();
    let d = c / heads;
    let q = linear(b, x, &format!("{base}.q")).split_heads(heads);
    let kv_src = if sr > 1 {
        let reduced = x.from_tokens(h, w).conv2d(
            b.get(&format!("{base}.sr.weight")),
            Some(b.get(&format!("{base}.sr.bias"))),
            ConvGeom::new(sr, sr, 0, 1),
        );
        layer_norm(b, reduced.to_tokens(), &format!("{base}.sr_norm"))
    } else {
        x
    };
    let kv = linear(b, kv_src, &format!("{base}.kv"));
    let k = kv.narrow_last(0, c).split_heads(heads);
    let v = kv.narrow_last(c, c).split_heads(heads);
    let attn = q.bmm(k, true).scale(1.0 / (d as f64).sqrt()).softmax_last();
    let out = attn.bmm(v, false).merge_heads(heads);
    b.dropout(linear(b, out, &format!("{base}.proj")))
}

fn mix_ffn<'t>(b: &Binder<'t, '_>, x: Var<'t>, (h, w): (usize, usize), base: &str) -> Var<'t> {
    let hidden = linear(b, x, &format!("{base}.fc1"));
    let mixed = hidden
        .from_tokens(h, w)
        .depthwise_conv2d(
            b.get(&format!("{base}.dwconv.weight")),
            b.get(&format!("{base}.dwconv.bias")),
        )
        .to_tokens()
        .gelu();
    b.dropout(linear(b, b.dropout(mixed), &format!("{base}.fc2")))
}

/// Run the encoder on an NCHW batch; returns the four stage maps.
pub fn forward<'t>(b: &Binder<'t, '_>, cfg: &EncoderConfig, x: Var<'t>) -> Result<Vec<Var<'t>>> {
    let (_, _, h, w) = x.value().dims4();
    check_input_size(h, w)?;
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut cur = x;
    for s in 0..NUM_STAGES {
        let st = format!("stage{s}");
        let embedded = cur.conv2d(
            b.get(&name(&[&st, "patch_embed", "proj", "weight"])),
            Some(b.get(&name(&[&st, "patch_embed", "proj", "bias"]))),
            patch_geom(cfg.patch_strides[s]),
        );
        let (_, _, sh, sw) = embedded.value().dims4();
        let mut tokens = layer_norm(b, embedded.to_tokens(), &name(&[&st, "patch_embed", "norm"]));
        for blk in 0..cfg.depths[s] {
            let base = name(&[&st, &format!("block{blk}")]);
            let normed = layer_norm(b, tokens, &format!("{base}.norm1"));
            let attn = attention(
                b,
                normed,
                (sh, sw),
                cfg.heads[s],
                cfg.attention_reduction[s],
                &format!("{base}.attn"),
            );
            tokens = tokens.add(attn);
            let normed = layer_norm(b, tokens, &format!("{base}.norm2"));
            tokens = tokens.add(mix_ffn(b, normed, (sh, sw), &format!("{base}.mlp")));
        }
        let out = layer_norm(b, tokens, &name(&[&st, "norm"])).from_tokens(sh, sw);
        stages.push(out);
        cur = out;
    }
    Ok(stages)
}

/// Pure encoder evaluation: `x` is `[N, 3, H, W]` (or `[3, H, W]`).
pub fn encode(x: &Tensor, params: &ParamStore, cfg: &EncoderConfig) -> Result<FeaturePyramid> {
    let x = if x.shape().len() == 3 {
        x.clone().reshape(&[1, x.shape()[0], x.shape()[1], x.shape()[2]])
    } else {
        x.clone()
    };
    if x.shape().len() != 4 {
        return Err(Error::Dimension(format!("expected NCHW input, got {:?}", x.shape())));
    }
    let (_, _, h, w) = x.dims4();
    validate_config(cfg, (h, w))?;
    let tape = Tape::inference();
    let binder = Binder::new(&tape, params);
    let stages = forward(&binder, cfg, tape.constant(x))?;
    Ok(FeaturePyramid {
        stages: stages.into_iter().map(|v| (*v.value()).clone()).collect(),
    })
}
