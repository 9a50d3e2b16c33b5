//! Factorized space-time U-Net.
//!
//! Every convolution is a per-frame 3x3 (the frame axis is never mixed by a
//! convolution).  At the configured attention resolutions a spatial
//! attention block (frames as batch) is followed by a temporal attention
//! block (pixels as batch) with a learned per-head relative-offset logit
//! bias.  Frames flagged in the conditioning mask are independent images:
//! in temporal attention they attend only to themselves and no other frame
//! attends to them, and since every other layer is frame-local the network
//! treats them exactly as if they were run on their own.
//!
//! Conditioning: 64 sinusoidal features of `λ/4`, concatenated with the
//! label embedding `c` (the zero vector when unconditional), go through an
//! MLP; a projection of the result is added inside every residual block.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::diffusion::{Conditioning, Denoiser, ParamMap, PredKind, Prediction, Trainable};
use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::{normal_vec, rng_for};
use crate::tensor::kernels::AttnMask;
use crate::tensor::{Real, Tensor};

pub const LAMBDA_FEATURES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub attention_resolutions: Vec<usize>,
    pub head_dim: usize,
    pub cond_embedding_dim: usize,
    pub cond_mlp_layers: usize,
    pub frames: usize,
    pub spatial_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// label classes; 0 for an unconditional-only model
    pub num_classes: usize,
    pub norm_groups: usize,
    pub prediction: PredKind,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_resolution: 1,
            attention_resolutions: vec![8, 16],
            head_dim: 16,
            cond_embedding_dim: 64,
            cond_mlp_layers: 2,
            frames: 8,
            spatial_size: 32,
            in_channels: 1,
            out_channels: 1,
            num_classes: 8,
            norm_groups: 8,
            prediction: PredKind::Epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Block {
    Res { name: String, cin: usize, cout: usize },
    Attn { name: String, ch: usize },
    Down { name: String, ch: usize },
    Up { name: String, ch: usize },
}

#[derive(Clone, Debug)]
struct Layout {
    /// blocks of the downsampling path; `true` marks a skip push after it
    down: Vec<(Block, bool)>,
    mid: Vec<Block>,
    /// blocks of the upsampling path; `true` marks a skip pop before it
    up: Vec<(Block, bool)>,
}

impl UNetConfig {
    /// Small config for smoke tests: base 8, multipliers [1, 2], F=4, 16x16.
    pub fn toy() -> Self {
        UNetConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_resolution: 1,
            attention_resolutions: vec![8],
            head_dim: 8,
            cond_embedding_dim: 32,
            cond_mlp_layers: 2,
            frames: 4,
            spatial_size: 16,
            in_channels: 1,
            out_channels: 1,
            num_classes: 8,
            norm_groups: 4,
            prediction: PredKind::Epsilon,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    fn level_channels(&self, l: usize) -> usize {
        self.base_channels * self.channel_multipliers[l]
    }

    fn resolution(&self, l: usize) -> usize {
        self.spatial_size >> l
    }

    fn uses_attention(&self, l: usize) -> bool {
        self.attention_resolutions.contains(&self.resolution(l))
    }

    fn rel_radius(&self) -> usize {
        self.frames.saturating_sub(1).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.levels();
        if k == 0 || self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(config_err!("unet needs base_channels > 0 and nonzero multipliers"));
        }
        if self.blocks_per_resolution == 0 || self.cond_mlp_layers == 0 {
            return Err(config_err!("unet needs blocks_per_resolution >= 1 and cond_mlp_layers >= 1"));
        }
        if self.frames == 0 || self.in_channels == 0 || self.out_channels == 0 || self.cond_embedding_dim == 0 {
            return Err(config_err!("unet frames, channels and embedding dim must be positive"));
        }
        let div = 1usize << (k - 1);
        if self.spatial_size == 0 || !self.spatial_size.is_multiple_of(div) {
            return Err(config_err!(
                "spatial_size {} not divisible by 2^{}",
                self.spatial_size,
                k - 1
            ));
        }
        let achievable: Vec<usize> = (0..k).map(|l| self.resolution(l)).collect();
        for r in &self.attention_resolutions {
            if !achievable.contains(r) {
                return Err(config_err!(
                    "attention resolution {r} not among {achievable:?}"
                ));
            }
        }
        if self.head_dim == 0 {
            return Err(config_err!("head_dim must be positive"));
        }
        let layout = self.layout();
        for b in layout.down.iter().map(|b| &b.0).chain(&layout.mid).chain(layout.up.iter().map(|b| &b.0)) {
            match b {
                Block::Attn { ch, .. } if ch % self.head_dim != 0 => {
                    return Err(config_err!("head_dim {} does not divide {ch} channels", self.head_dim));
                }
                _ => {}
            }
        }
        for c in self.norm_channels() {
            if self.norm_groups == 0 || c % self.norm_groups != 0 {
                return Err(config_err!(
                    "norm_groups {} does not divide {c} channels",
                    self.norm_groups
                ));
            }
        }
        Ok(())
    }

    fn norm_channels(&self) -> Vec<usize> {
        let layout = self.layout();
        let mut out = vec![self.base_channels];
        for b in layout.down.iter().map(|b| &b.0).chain(&layout.mid).chain(layout.up.iter().map(|b| &b.0)) {
            match b {
                Block::Res { cin, cout, .. } => out.extend([*cin, *cout]),
                Block::Attn { ch, .. } => out.push(*ch),
                _ => {}
            }
        }
        out
    }

    fn layout(&self) -> Layout {
        let k = self.levels();
        let mut down = Vec::new();
        let mut skips = vec![self.base_channels];
        let mut ch = self.base_channels;
        for l in 0..k {
            let c = self.level_channels(l);
            for b in 0..self.blocks_per_resolution {
                down.push((
                    Block::Res {
                        name: format!("down.{l}.res.{b}"),
                        cin: ch,
                        cout: c,
                    },
                    !self.uses_attention(l),
                ));
                ch = c;
                if self.uses_attention(l) {
                    down.push((
                        Block::Attn {
                            name: format!("down.{l}.attn.{b}"),
                            ch,
                        },
                        true,
                    ));
                }
                skips.push(ch);
            }
            if l + 1 < k {
                down.push((Block::Down { name: format!("down.{l}.downsample"), ch }, true));
                skips.push(ch);
            }
        }
        let mid = vec![
            Block::Res {
                name: "mid.res.0".into(),
                cin: ch,
                cout: ch,
            },
            Block::Attn {
                name: "mid.attn".into(),
                ch,
            },
            Block::Res {
                name: "mid.res.1".into(),
                cin: ch,
                cout: ch,
            },
        ];
        let mut up = Vec::new();
        let mut stack = skips;
        for l in (0..k).rev() {
            let c = self.level_channels(l);
            for b in 0..=self.blocks_per_resolution {
                let sc = stack.pop().expect("skip stack balanced");
                up.push((
                    Block::Res {
                        name: format!("up.{l}.res.{b}"),
                        cin: ch + sc,
                        cout: c,
                    },
                    true,
                ));
                ch = c;
                if self.uses_attention(l) {
                    up.push((
                        Block::Attn {
                            name: format!("up.{l}.attn.{b}"),
                            ch,
                        },
                        false,
                    ));
                }
            }
            if l > 0 {
                up.push((Block::Up { name: format!("up.{l}.upsample"), ch }, false));
            }
        }
        Layout {
            down,
            mid,
            up,
        }
    }

    /// Closed-form parameter count.
    ///
    /// conv 3x3 `cin→cout`: `9·cin·cout + cout`; linear: `cin·cout + cout`;
    /// norm: `2c`.  Residual block: two norms, two convs, the embedding
    /// projection `E·cout + cout`, and a linear skip when `cin ≠ cout`.
    /// Attention block at `c` channels: spatial and temporal halves of one
    /// norm and four `c x c` linears each, plus `heads·(2R+1)` offset biases,
    /// `R = max(F−1, 1)`.  Embedding: `classes·E` table and an MLP whose
    /// first layer reads `64 + E` features.
    pub fn param_count(&self) -> usize {
        let e = self.cond_embedding_dim;
        let conv = |a: usize, b: usize| 9 * a * b + b;
        let lin = |a: usize, b: usize| a * b + b;
        let res = |a: usize, b: usize| {
            2 * a + conv(a, b) + lin(e, b) + 2 * b + conv(b, b) + if a != b { lin(a, b) } else { 0 }
        };
        let attn = |c: usize| 2 * (2 * c + 4 * lin(c, c)) + (c / self.head_dim) * (2 * self.rel_radius() + 1);
        let k = self.levels();
        let nb = self.blocks_per_resolution;
        let mut n = conv(self.in_channels, self.base_channels);
        n += self.num_classes * e + lin(LAMBDA_FEATURES + e, e) + (self.cond_mlp_layers - 1) * lin(e, e);
        // downsampling path, tracking the skip channels
        let mut ch = self.base_channels;
        let mut skips = vec![ch];
        for l in 0..k {
            let c = self.level_channels(l);
            for _ in 0..nb {
                n += res(ch, c);
                ch = c;
                if self.uses_attention(l) {
                    n += attn(c);
                }
                skips.push(c);
            }
            if l + 1 < k {
                n += conv(c, c);
                skips.push(c);
            }
        }
        n += 2 * res(ch, ch) + attn(ch);
        for l in (0..k).rev() {
            let c = self.level_channels(l);
            for _ in 0..=nb {
                n += res(ch + skips.pop().unwrap(), c);
                ch = c;
                if self.uses_attention(l) {
                    n += attn(c);
                }
            }
            if l > 0 {
                n += conv(c, c);
            }
        }
        n + 2 * self.base_channels + conv(self.base_channels, self.out_channels)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    layout: Layout,
}

/// Shapes and init scales of every parameter.
fn param_specs(cfg: &UNetConfig, layout: &Layout) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let e = cfg.cond_embedding_dim;
    let conv = |out: &mut Vec<_>, name: &str, a: usize, b: usize, small: bool| {
        let std = (1.0 / (9 * a) as f64).sqrt() * if small { 0.1 } else { 1.0 };
        out.push((format!("{name}.w"), vec![3, 3, a, b], Init::Normal(std)));
        out.push((format!("{name}.b"), vec![b], Init::Zero));
    };
    let lin = |out: &mut Vec<_>, name: &str, a: usize, b: usize, small: bool| {
        let std = (1.0 / a as f64).sqrt() * if small { 0.1 } else { 1.0 };
        out.push((format!("{name}.w"), vec![a, b], Init::Normal(std)));
        out.push((format!("{name}.b"), vec![b], Init::Zero));
    };
    let norm = |out: &mut Vec<_>, name: &str, c: usize| {
        out.push((format!("{name}.scale"), vec![c], Init::One));
        out.push((format!("{name}.shift"), vec![c], Init::Zero));
    };
    conv(&mut out, "conv_in", cfg.in_channels, cfg.base_channels, false);
    if cfg.num_classes > 0 {
        out.push(("embed.labels".into(), vec![cfg.num_classes, e], Init::Normal(1.0)));
    }
    for i in 0..cfg.cond_mlp_layers {
        let a = if i == 0 { LAMBDA_FEATURES + e } else { e };
        lin(&mut out, &format!("embed.mlp.{i}"), a, e, false);
    }
    let heads = |c: usize| c / cfg.head_dim;
    let width = 2 * cfg.rel_radius() + 1;
    let blocks = layout
        .down
        .iter()
        .map(|b| &b.0)
        .chain(&layout.mid)
        .chain(layout.up.iter().map(|b| &b.0));
    for b in blocks {
        match b {
            Block::Res { name, cin, cout } => {
                norm(&mut out, &format!("{name}.norm1"), *cin);
                conv(&mut out, &format!("{name}.conv1"), *cin, *cout, false);
                lin(&mut out, &format!("{name}.emb"), e, *cout, false);
                norm(&mut out, &format!("{name}.norm2"), *cout);
                conv(&mut out, &format!("{name}.conv2"), *cout, *cout, true);
                if cin != cout {
                    lin(&mut out, &format!("{name}.skip"), *cin, *cout, false);
                }
            }
            Block::Attn { name, ch } => {
                for part in ["spatial", "temporal"] {
                    norm(&mut out, &format!("{name}.{part}.norm"), *ch);
                    for p in ["q", "k", "v"] {
                        lin(&mut out, &format!("{name}.{part}.{p}"), *ch, *ch, false);
                    }
                    lin(&mut out, &format!("{name}.{part}.out"), *ch, *ch, true);
                }
                out.push((format!("{name}.temporal.rel"), vec![heads(*ch), width], Init::Normal(0.1)));
            }
            Block::Down { name, ch } | Block::Up { name, ch } => {
                conv(&mut out, &format!("{name}.conv"), *ch, *ch, false);
            }
        }
    }
    norm(&mut out, "out.norm", cfg.base_channels);
    conv(&mut out, "out.conv", cfg.base_channels, cfg.out_channels, true);
    out
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    One,
    Normal(f64),
}

/// Sinusoidal features of `λ/4`: `sin(λ/4 · f_k)` then `cos(λ/4 · f_k)`,
/// `f_k = 10000^{−k/32}`.
pub fn lambda_features(lambda: f64) -> Vec<f64> {
    let half = LAMBDA_FEATURES / 2;
    let x = lambda / 4.0;
    let freq = |k: usize| (-(10000f64).ln() * k as f64 / half as f64).exp();
    (0..half)
        .map(|k| (x * freq(k)).sin())
        .chain((0..half).map(|k| (x * freq(k)).cos()))
        .collect()
}

struct Ctx<'a, T: Real> {
    g: &'a Graph<T>,
    p: &'a ParamMap<T>,
    cfg: &'a UNetConfig,
}

impl<'a, T: Real> Ctx<'a, T> {
    fn param(&self, name: &str) -> Result<Var> {
        let t = self
            .p
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))?;
        Ok(self.g.param(name, t))
    }

    /// `x [.., cin] · W + b` over the last axis.
    fn linear(&self, x: Var, name: &str) -> Result<Var> {
        let dims = self.g.dims(x);
        let cin = *dims.last().unwrap();
        let rows = dims.iter().product::<usize>() / cin;
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let cout = self.g.dims(w)[1];
        let x2 = self.g.reshape(x, &[rows, cin])?;
        let y = self.g.matmul(x2, w)?;
        let y = self.g.add(y, b)?;
        let mut od = dims.clone();
        *od.last_mut().unwrap() = cout;
        self.g.reshape(y, &od)
    }

    fn conv(&self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.g.conv_spatial(x, w, b, stride)
    }

    fn norm(&self, x: Var, name: &str) -> Result<Var> {
        let s = self.param(&format!("{name}.scale"))?;
        let b = self.param(&format!("{name}.shift"))?;
        self.g.group_norm(x, self.cfg.norm_groups, s, b)
    }

    fn res_block(&self, x: Var, emb: Var, name: &str, cin: usize, cout: usize) -> Result<Var> {
        let g = self.g;
        let h = self.norm(x, &format!("{name}.norm1"))?;
        let h = g.silu(h);
        let h = self.conv(h, &format!("{name}.conv1"), 1)?;
        let e = g.silu(emb);
        let e = self.linear(e, &format!("{name}.emb"))?;
        let e = g.reshape(e, &[cout])?;
        let h = g.add(h, e)?;
        let h = self.norm(h, &format!("{name}.norm2"))?;
        let h = g.silu(h);
        let h = self.conv(h, &format!("{name}.conv2"), 1)?;
        let skip = if cin != cout {
            self.linear(x, &format!("{name}.skip"))?
        } else {
            x
        };
        g.add(skip, h)
    }

    /// q/k/v projections, attention, output projection over `[B, L, C]`.
    fn attend(&self, x: Var, name: &str, bias: Option<Var>, mask: AttnMask) -> Result<Var> {
        let c = *self.g.dims(x).last().unwrap();
        let q = self.linear(x, &format!("{name}.q"))?;
        let k = self.linear(x, &format!("{name}.k"))?;
        let v = self.linear(x, &format!("{name}.v"))?;
        let heads = c / self.cfg.head_dim;
        let a = self.g.attention(q, k, v, heads, bias, mask)?;
        self.linear(a, &format!("{name}.out"))
    }

    fn spatial_attention(&self, x: Var, name: &str) -> Result<Var> {
        let d = self.g.dims(x);
        let h = self.norm(x, &format!("{name}.norm"))?;
        let h = self.g.reshape(h, &[d[0], d[1] * d[2], d[3]])?;
        let h = self.attend(h, name, None, AttnMask::None)?;
        let h = self.g.reshape(h, &d)?;
        self.g.add(x, h)
    }

    fn temporal_attention(&self, x: Var, name: &str, mask: &[bool]) -> Result<Var> {
        let g = self.g;
        let d = g.dims(x);
        let (f, px, c) = (d[0], d[1] * d[2], d[3]);
        let h = self.norm(x, &format!("{name}.norm"))?;
        let h = g.reshape(h, &[f, px, c])?;
        let h = g.swap_leading(h)?;
        let mask = if mask.iter().any(|&m| m) {
            AttnMask::Independent(mask.to_vec())
        } else {
            AttnMask::None
        };
        let table = self.param(&format!("{name}.rel"))?;
        let bias = g.relative_bias(table, f)?;
        let h = self.attend(h, name, Some(bias), mask)?;
        let h = g.swap_leading(h)?;
        let h = g.reshape(h, &d)?;
        g.add(x, h)
    }

    fn attention_block(&self, x: Var, name: &str, mask: &[bool]) -> Result<Var> {
        let x = self.spatial_attention(x, &format!("{name}.spatial"))?;
        self.temporal_attention(x, &format!("{name}.temporal"), mask)
    }

    /// MLP over `[λ features, c]`; returns `[E]`.
    fn embed(&self, feats: Var, c: Var) -> Result<Var> {
        let g = self.g;
        let mut h = g.concat(&[feats, c])?;
        for i in 0..self.cfg.cond_mlp_layers {
            if i > 0 {
                h = g.silu(h);
            }
            h = self.linear(h, &format!("embed.mlp.{i}"))?;
        }
        g.reshape(h, &[self.cfg.cond_embedding_dim])
    }

    fn label_vector(&self, label: Option<usize>) -> Result<Var> {
        let e = self.cfg.cond_embedding_dim;
        match label {
            None => Ok(self.g.constant(Tensor::zeros(&[1, e]))),
            Some(l) if l < self.cfg.num_classes => {
                let table = self.param("embed.labels")?;
                let onehot = Tensor::from_fn(&[1, self.cfg.num_classes], |i| {
                    if i == l {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
                let oh = self.g.constant(onehot);
                self.g.matmul(oh, table)
            }
            Some(l) => Err(Error::Config(format!(
                "label {l} out of range for {} classes",
                self.cfg.num_classes
            ))),
        }
    }
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        Ok(UNet { cfg, layout })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamMap<T> {
        let mut rng = rng_for(seed, "unet-init", 0);
        let mut out = BTreeMap::new();
        for (name, dims, init) in param_specs(&self.cfg, &self.layout) {
            let n: usize = dims.iter().product();
            let data: Vec<T> = match init {
                Init::Zero => vec![T::zero(); n],
                Init::One => vec![T::one(); n],
                Init::Normal(std) => normal_vec(&mut rng, n).into_iter().map(|v| T::of(v * std)).collect(),
            };
            out.insert(name, Tensor::from_parts(dims, data));
        }
        out
    }

    /// Names and dims every parameter map must have.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        param_specs(&self.cfg, &self.layout)
            .into_iter()
            .map(|(n, d, _)| (n, d))
            .collect()
    }

    pub fn check_params<T: Real>(&self, params: &ParamMap<T>) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(config_err!(
                "parameter map has {} tensors, network needs {}",
                params.len(),
                shapes.len()
            ));
        }
        for (name, dims) in shapes {
            match params.get(&name) {
                Some(t) if t.dims() == dims.as_slice() => {}
                Some(t) => return Err(shape_err!("parameter '{name}' is {:?}, expected {dims:?}", t.dims())),
                None => return Err(config_err!("missing parameter '{name}'")),
            }
        }
        Ok(())
    }

    /// Conditioning embedding for an explicit `c` vector.
    pub fn embed_conditioning<T: Real>(&self, params: &ParamMap<T>, c: &[f64], lambda: f64) -> Result<Vec<f64>> {
        let e = self.cfg.cond_embedding_dim;
        if c.len() != e {
            return Err(shape_err!("c has {} entries, expected {e}", c.len()));
        }
        if !lambda.is_finite() {
            return Err(Error::Domain(format!("non-finite lambda {lambda}")));
        }
        let g = Graph::<T>::inference();
        let ctx = Ctx { g: &g, p: params, cfg: &self.cfg };
        let feats = g.constant(Tensor::from_f64(&[1, LAMBDA_FEATURES], &lambda_features(lambda))?);
        let cv = g.constant(Tensor::from_f64(&[1, e], c)?);
        let out = ctx.embed(feats, cv)?;
        Ok(g.value(out).to_f64_vec())
    }

    /// Embedding on a caller's graph from explicit feature and `c` vars.
    pub fn embed_on<T: Real>(&self, g: &Graph<T>, params: &ParamMap<T>, feats: Var, c: Var) -> Result<Var> {
        Ctx { g, p: params, cfg: &self.cfg }.embed(feats, c)
    }

    /// A single attention block (spatial then temporal) on a caller's graph.
    pub fn attention_block_on<T: Real>(
        &self,
        g: &Graph<T>,
        params: &ParamMap<T>,
        x: Var,
        name: &str,
        mask: &[bool],
    ) -> Result<Var> {
        Ctx { g, p: params, cfg: &self.cfg }.attention_block(x, name, mask)
    }

    pub fn spatial_attention_on<T: Real>(&self, g: &Graph<T>, params: &ParamMap<T>, x: Var, name: &str) -> Result<Var> {
        Ctx { g, p: params, cfg: &self.cfg }.spatial_attention(x, name)
    }

    pub fn temporal_attention_on<T: Real>(
        &self,
        g: &Graph<T>,
        params: &ParamMap<T>,
        x: Var,
        name: &str,
        mask: &[bool],
    ) -> Result<Var> {
        Ctx { g, p: params, cfg: &self.cfg }.temporal_attention(x, name, mask)
    }

    fn check_input(&self, dims: &[usize], cond: &Conditioning) -> Result<()> {
        let c = &self.cfg;
        if dims.len() != 4 || dims[1] != c.spatial_size || dims[2] != c.spatial_size || dims[3] != c.in_channels {
            return Err(shape_err!(
                "input {:?}, network expects [F, {}, {}, {}]",
                dims,
                c.spatial_size,
                c.spatial_size,
                c.in_channels
            ));
        }
        if !cond.frame_mask.is_empty() && cond.frame_mask.len() != dims[0] {
            return Err(shape_err!(
                "frame mask of length {} for {} frames",
                cond.frame_mask.len(),
                dims[0]
            ));
        }
        Ok(())
    }
}

impl<T: Real> Trainable<T> for UNet {
    fn kind(&self) -> PredKind {
        self.cfg.prediction
    }

    fn forward(&self, g: &Graph<T>, params: &ParamMap<T>, z: Var, lambda: f64, cond: &Conditioning) -> Result<Var> {
        let dims = g.dims(z);
        self.check_input(&dims, cond)?;
        let ctx = Ctx { g, p: params, cfg: &self.cfg };
        let mask = &cond.frame_mask;
        let feats = g.constant(Tensor::from_f64(&[1, LAMBDA_FEATURES], &lambda_features(lambda))?);
        let c = ctx.label_vector(cond.label)?;
        let emb = ctx.embed(feats, c)?;

        let mut h = ctx.conv(z, "conv_in", 1)?;
        let mut skips = vec![h];
        for (b, push) in &self.layout.down {
            h = self.apply(&ctx, b, h, emb, mask)?;
            if *push {
                skips.push(h);
            }
        }
        for b in &self.layout.mid {
            h = self.apply(&ctx, b, h, emb, mask)?;
        }
        for (b, pop) in &self.layout.up {
            if *pop {
                let s = skips.pop().ok_or_else(|| shape_err!("skip stack underflow"))?;
                h = g.concat(&[h, s])?;
            }
            h = self.apply(&ctx, b, h, emb, mask)?;
        }
        debug_assert!(skips.is_empty());
        let h = ctx.norm(h, "out.norm")?;
        let h = g.silu(h);
        ctx.conv(h, "out.conv", 1)
    }
}

impl UNet {
    fn apply<T: Real>(&self, ctx: &Ctx<'_, T>, b: &Block, h: Var, emb: Var, mask: &[bool]) -> Result<Var> {
        match b {
            Block::Res { name, cin, cout } => ctx.res_block(h, emb, name, *cin, *cout),
            Block::Attn { name, .. } => ctx.attention_block(h, name, mask),
            Block::Down { name, .. } => ctx.conv(h, &format!("{name}.conv"), 2),
            Block::Up { name, .. } => {
                let u = ctx.g.upsample2(h)?;
                ctx.conv(u, &format!("{name}.conv"), 1)
            }
        }
    }

    /// Forward pass without taping.
    pub fn run<T: Real>(&self, params: &ParamMap<T>, z: &Tensor, lambda: f64, cond: &Conditioning) -> Result<Tensor> {
        let g = Graph::<T>::inference();
        let zv = g.constant(z.cast());
        let out = <Self as Trainable<T>>::forward(self, &g, params, zv, lambda, cond)?;
        Ok(g.value(out).cast())
    }

    /// Output and `Jᵀ cot` with respect to the input.
    pub fn run_vjp<T: Real>(
        &self,
        params: &ParamMap<T>,
        z: &Tensor,
        lambda: f64,
        cond: &Conditioning,
        cot: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let g = Graph::<T>::input_grad();
        let zv = g.leaf(z.cast(), true);
        let out = <Self as Trainable<T>>::forward(self, &g, params, zv, lambda, cond)?;
        let grads = g.backward(out, &cot.cast())?;
        Ok((g.value(out).cast(), grads.get(zv).cast()))
    }
}

/// A U-Net with fixed parameters (usually the EMA copy), as a denoiser.
#[derive(Clone, Debug)]
pub struct UNetDenoiser<T: Real = f32> {
    pub net: UNet,
    pub params: ParamMap<T>,
    /// frames the sampler draws; defaults to the network's configured count
    pub frames: usize,
}

impl<T: Real> UNetDenoiser<T> {
    pub fn new(net: UNet, params: ParamMap<T>) -> Result<Self> {
        net.check_params(&params)?;
        let frames = net.cfg.frames;
        Ok(UNetDenoiser { net, params, frames })
    }
}

impl<T: Real> Denoiser for UNetDenoiser<T> {
    fn kind(&self) -> PredKind {
        self.net.cfg.prediction
    }

    fn dims(&self) -> [usize; 4] {
        let c = &self.net.cfg;
        [self.frames, c.spatial_size, c.spatial_size, c.out_channels]
    }

    fn predict(&self, z: &Tensor, lambda: f64, cond: &Conditioning) -> Result<Prediction> {
        let out = self.net.run(&self.params, z, lambda, cond)?;
        Ok(Prediction::new(self.kind(), out))
    }

    fn vjp(&self, z: &Tensor, lambda: f64, cond: &Conditioning, cot: &Tensor) -> Result<(Prediction, Tensor)> {
        let (out, jt) = self.net.run_vjp(&self.params, z, lambda, cond, cot)?;
        Ok((Prediction::new(self.kind(), out), jt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_for};

    fn tiny(frames: usize) -> UNetConfig {
        UNetConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_resolution: 1,
            attention_resolutions: vec![2],
            head_dim: 4,
            cond_embedding_dim: 8,
            cond_mlp_layers: 2,
            frames,
            spatial_size: 4,
            in_channels: 1,
            out_channels: 1,
            num_classes: 3,
            norm_groups: 2,
            prediction: PredKind::Epsilon,
        }
    }

    fn video(dims: &[usize], seed: u64) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), normal_vec(&mut rng_for(seed, "unet-test", 0), n)).unwrap()
    }

    #[test]
    fn param_count_matches_construction() {
        let mut cfgs = vec![tiny(3), UNetConfig::default()];
        let mut c = tiny(5);
        c.blocks_per_resolution = 2;
        c.channel_multipliers = vec![1, 2, 2];
        c.attention_resolutions = vec![4, 1];
        c.num_classes = 0;
        c.cond_mlp_layers = 3;
        cfgs.push(c);
        for cfg in cfgs {
            let net = UNet::new(cfg.clone()).unwrap();
            let p: ParamMap<f32> = net.init_params(0);
            let built: usize = p.values().map(|t| t.len()).sum();
            assert_eq!(built, cfg.param_count(), "{cfg:?}");
            net.check_params(&p).unwrap();
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny(2);
        c.spatial_size = 6;
        c.channel_multipliers = vec![1, 2, 2];
        assert!(UNet::new(c).is_err());
        let mut c = tiny(2);
        c.attention_resolutions = vec![3];
        assert!(UNet::new(c).is_err());
        let mut c = tiny(2);
        c.norm_groups = 3;
        assert!(UNet::new(c).is_err());
        let mut c = tiny(2);
        c.head_dim = 3;
        assert!(UNet::new(c).is_err());
    }

    #[test]
    fn output_shape_and_bad_inputs() {
        let net = UNet::new(tiny(3)).unwrap();
        let p: ParamMap<f64> = net.init_params(1);
        let z = video(&[3, 4, 4, 1], 2);
        let out = net.run(&p, &z, 0.5, &Conditioning::label(1)).unwrap();
        assert_eq!(out.dims(), &[3, 4, 4, 1]);
        assert!(out.all_finite());
        assert!(net.run(&p, &video(&[3, 2, 4, 1], 0), 0.0, &Conditioning::none()).is_err());
        assert!(net.run(&p, &z, 0.0, &Conditioning::label(3)).is_err());
        let bad = Conditioning::none().with_mask(vec![true; 2]);
        assert!(net.run(&p, &z, 0.0, &bad).is_err());
        let mut q = p.clone();
        q.remove("out.conv.b");
        assert!(net.check_params(&q).is_err());
    }

    #[test]
    fn label_changes_output() {
        let net = UNet::new(tiny(2)).unwrap();
        let p: ParamMap<f64> = net.init_params(3);
        let z = video(&[2, 4, 4, 1], 4);
        let a = net.run(&p, &z, 1.0, &Conditioning::label(0)).unwrap();
        let b = net.run(&p, &z, 1.0, &Conditioning::label(2)).unwrap();
        let u = net.run(&p, &z, 1.0, &Conditioning::none()).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
        assert!(a.max_abs_diff(&u) > 1e-6);
    }

    #[test]
    fn masked_frames_are_independent() {
        let net = UNet::new(tiny(4)).unwrap();
        let p: ParamMap<f64> = net.init_params(5);
        let cond = Conditioning::none().with_mask(vec![false, false, true, true]);
        let z = video(&[4, 4, 4, 1], 6);
        let base = net.run(&p, &z, -1.0, &cond).unwrap();
        // perturb a masked frame: nothing else moves
        let z2 = z.with_frames(&[3], &video(&[1, 4, 4, 1], 7)).unwrap();
        let o2 = net.run(&p, &z2, -1.0, &cond).unwrap();
        assert_eq!(base.select_frames(&[0, 1, 2]).unwrap().data(), o2.select_frames(&[0, 1, 2]).unwrap().data());
        assert!(base.frame(3).max_abs_diff(&o2.frame(3)) > 0.0);
        // perturb a video frame: masked frames stay put, the other video frame moves
        let z3 = z.with_frames(&[0], &video(&[1, 4, 4, 1], 8)).unwrap();
        let o3 = net.run(&p, &z3, -1.0, &cond).unwrap();
        assert_eq!(base.select_frames(&[2, 3]).unwrap().data(), o3.select_frames(&[2, 3]).unwrap().data());
        assert!(base.frame(1).max_abs_diff(&o3.frame(1)) > 1e-9);
    }

    #[test]
    fn masked_frame_equals_single_frame_run() {
        let net = UNet::new(tiny(4)).unwrap();
        let p: ParamMap<f64> = net.init_params(9);
        let z = video(&[4, 4, 4, 1], 10);
        let cond = Conditioning::label(1).with_mask(vec![false, true, false, true]);
        let full = net.run(&p, &z, 2.0, &cond).unwrap();
        for f in [1, 3] {
            let single = Conditioning::label(1).with_mask(vec![true]);
            let one = net.run(&p, &z.select_frames(&[f]).unwrap(), 2.0, &single).unwrap();
            assert!(one.max_abs_diff(&full.frame(f)) < 1e-12);
            let unmasked = net.run(&p, &z.select_frames(&[f]).unwrap(), 2.0, &Conditioning::label(1)).unwrap();
            assert!(one.max_abs_diff(&unmasked) < 1e-12);
        }
    }

    #[test]
    fn frame_permutation_equivariant_without_offset_bias() {
        let net = UNet::new(tiny(4)).unwrap();
        let mut p: ParamMap<f64> = net.init_params(11);
        for (k, v) in p.iter_mut() {
            if k.ends_with(".rel") {
                *v = Tensor::zeros(v.dims());
            }
        }
        let z = video(&[4, 4, 4, 1], 12);
        let perm = [2, 0, 3, 1];
        let out = net.run(&p, &z, 0.0, &Conditioning::none()).unwrap();
        let outp = net.run(&p, &z.select_frames(&perm).unwrap(), 0.0, &Conditioning::none()).unwrap();
        assert!(outp.max_abs_diff(&out.select_frames(&perm).unwrap()) < 1e-10);
        // with the offset bias back, order matters
        let q: ParamMap<f64> = net.init_params(11);
        let out = net.run(&q, &z, 0.0, &Conditioning::none()).unwrap();
        let outp = net.run(&q, &z.select_frames(&perm).unwrap(), 0.0, &Conditioning::none()).unwrap();
        assert!(outp.max_abs_diff(&out.select_frames(&perm).unwrap()) > 1e-8);
    }

    #[test]
    fn two_frame_logits_with_offsets() {
        // one head, d = 2: logits = q·k/√2 + table[clip(j - i)]
        let g = Graph::<f64>::inference();
        let q = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.5, 2.0]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 2, 2], vec![0.3, -1.0, 2.0, 1.0]).unwrap());
        let v = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, -3.0, 4.0]).unwrap());
        let table = g.constant(Tensor::new(vec![1, 3], vec![0.7, 0.0, -0.4]).unwrap());
        let bias = g.relative_bias(table, 2).unwrap();
        let out = g.value(g.attention(q, k, v, 1, Some(bias), AttnMask::None).unwrap());
        let s = 2f64.sqrt();
        let table = [0.7, 0.0, -0.4];
        let qv = [[1.0, 0.0], [0.5, 2.0]];
        let kv = [[0.3, -1.0], [2.0, 1.0]];
        let vv = [[1.0, 2.0], [-3.0, 4.0]];
        for i in 0..2 {
            let l: Vec<f64> = (0..2)
                .map(|j| (qv[i][0] * kv[j][0] + qv[i][1] * kv[j][1]) / s + table[(j + 1) - i])
                .collect();
            let m = l[0].max(l[1]);
            let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
            let z = e[0] + e[1];
            for c in 0..2 {
                let want = (e[0] * vv[0][c] + e[1] * vv[1][c]) / z;
                assert!((out.data()[i * 2 + c] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_frame_attention_matches_image_reference() {
        use nalgebra::DMatrix;
        let mut cfg = tiny(1);
        cfg.base_channels = 4;
        cfg.head_dim = 2;
        let net = UNet::new(cfg).unwrap();
        let p: ParamMap<f64> = net.init_params(13);
        let name = "down.1.attn.0";
        let x = video(&[1, 2, 2, 8], 14);
        let g = Graph::<f64>::inference();
        let xv = g.constant(x.clone());
        let out = g.value(net.attention_block_on(&g, &p, xv, name, &[]).unwrap());

        // reference on a [pixels, channels] matrix
        let c = 8;
        let mat = |t: &Tensor, r: usize, k: usize| DMatrix::from_row_slice(r, k, t.data());
        let norm = |m: &DMatrix<f64>, pre: &str| {
            let (gs, groups) = (c / 2, 2);
            let mut y = m.clone();
            for gi in 0..groups {
                let vals: Vec<f64> = (0..m.nrows())
                    .flat_map(|r| (0..gs).map(move |j| (r, gi * gs + j)))
                    .map(|(r, j)| m[(r, j)])
                    .collect();
                let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
                for r in 0..m.nrows() {
                    for j in gi * gs..(gi + 1) * gs {
                        let s = p[&format!("{pre}.norm.scale")].data()[j];
                        let b = p[&format!("{pre}.norm.shift")].data()[j];
                        y[(r, j)] = (m[(r, j)] - mu) / (var + 1e-5).sqrt() * s + b;
                    }
                }
            }
            y
        };
        let lin = |m: &DMatrix<f64>, pre: &str| {
            let w = mat(&p[&format!("{pre}.w")], c, c);
            let b = &p[&format!("{pre}.b")];
            let mut y = m * w;
            for r in 0..y.nrows() {
                for j in 0..c {
                    y[(r, j)] += b.data()[j];
                }
            }
            y
        };
        let x0 = mat(&x, 4, c);
        let sp = format!("{name}.spatial");
        let h = norm(&x0, &sp);
        let (q, k, v) = (lin(&h, &format!("{sp}.q")), lin(&h, &format!("{sp}.k")), lin(&h, &format!("{sp}.v")));
        let mut a = DMatrix::zeros(4, c);
        for head in 0..4 {
            let cols = head * 2..head * 2 + 2;
            let qh = q.columns(cols.start, 2);
            let kh = k.columns(cols.start, 2);
            let vh = v.columns(cols.start, 2);
            let mut s = qh * kh.transpose() / 2f64.sqrt();
            for r in 0..4 {
                let m = s.row(r).max();
                let mut row = s.row(r).map(|e| (e - m).exp());
                row /= row.sum();
                s.set_row(r, &row);
            }
            a.columns_mut(cols.start, 2).copy_from(&(s * vh));
        }
        let x1 = x0 + lin(&a, &format!("{sp}.out"));
        // temporal half over one frame: attention is the identity on v
        let tp = format!("{name}.temporal");
        let h = norm(&x1, &tp);
        let x2 = &x1 + lin(&lin(&h, &format!("{tp}.v")), &format!("{tp}.out"));
        let want: Vec<f64> = (0..4).flat_map(|r| (0..c).map(move |j| (r, j))).map(|ij| x2[ij]).collect();
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let net = UNet::new(tiny(2)).unwrap();
        let p: ParamMap<f64> = net.init_params(15);
        let z = video(&[2, 4, 4, 1], 16);
        let cot = video(&[2, 4, 4, 1], 17);
        let dir = video(&[2, 4, 4, 1], 18);
        let cond = Conditioning::label(0).with_mask(vec![false, true]);
        let (_, jt) = net.run_vjp(&p, &z, 0.3, &cond, &cot).unwrap();
        let h = 1e-5;
        let fp = net.run(&p, &z.lincomb(1.0, &dir, h).unwrap(), 0.3, &cond).unwrap();
        let fm = net.run(&p, &z.lincomb(1.0, &dir, -h).unwrap(), 0.3, &cond).unwrap();
        let fd = (fp.dot(&cot) - fm.dot(&cot)) / (2.0 * h);
        let an = jt.dot(&dir);
        assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
    }

    #[test]
    fn embedding_gradient_wrt_features() {
        let net = UNet::new(tiny(2)).unwrap();
        let p: ParamMap<f64> = net.init_params(19);
        let feats = Tensor::from_f64(&[1, LAMBDA_FEATURES], &lambda_features(1.7)).unwrap();
        let c = video(&[1, 8], 20);
        let cot = video(&[8], 21);
        let g = Graph::<f64>::input_grad();
        let fv = g.leaf(feats.clone(), true);
        let cv = g.constant(c.clone());
        let e = net.embed_on(&g, &p, fv, cv).unwrap();
        let grads = g.backward(e, &cot).unwrap();
        let an = grads.get(fv);
        let h = 1e-6;
        for i in [0, 5, 33, 63] {
            let eval = |d: f64| {
                let mut f = feats.to_vec();
                f[i] += d;
                let g = Graph::<f64>::inference();
                let fv = g.constant(Tensor::new(vec![1, LAMBDA_FEATURES], f).unwrap());
                let cv = g.constant(c.clone());
                g.value(net.embed_on(&g, &p, fv, cv).unwrap()).dot(&cot)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - an.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", an.data()[i]);
        }
        // explicit-c entry point agrees with the label path
        let v = net.embed_conditioning(&p, c.data(), 1.7).unwrap();
        assert_eq!(v.len(), 8);
        assert!(net.embed_conditioning(&p, &[0.0; 3], 1.7).is_err());
    }

    #[test]
    fn lambda_features_shape() {
        let f = lambda_features(0.0);
        assert_eq!(f.len(), LAMBDA_FEATURES);
        assert!(f[..32].iter().all(|&v| v == 0.0));
        assert!(f[32..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn denoiser_wrapper_round_trip() {
        let net = UNet::new(tiny(2)).unwrap();
        let p: ParamMap<f32> = net.init_params(22);
        let d = UNetDenoiser::new(net.clone(), p.clone()).unwrap();
        assert_eq!(d.dims(), [2, 4, 4, 1]);
        let z = video(&[2, 4, 4, 1], 23);
        let pred = d.predict(&z, 0.0, &Conditioning::none()).unwrap();
        assert_eq!(pred.kind, PredKind::Epsilon);
        let (p2, jt) = d.vjp(&z, 0.0, &Conditioning::none(), &z).unwrap();
        assert!(p2.value.max_abs_diff(&pred.value) < 1e-6);
        assert_eq!(jt.dims(), z.dims());
    }
}
