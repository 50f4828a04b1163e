//! Toy UNet with 70 cross-attention sites and two extra conditioning streams.
//!
//! Layout (channels last, latent `[32, 32, 4]`):
//!
//! | stage   | resolution | blocks   |
//! |---------|------------|----------|
//! | encoder | 16         | 0..4     |
//! | encoder | 8          | 4..24    |
//! | middle  | 8          | 24..34   |
//! | decoder | 8          | 34..64   |
//! | decoder | 16         | 64..70   |
//!
//! Each cross-attention site computes
//! `x + (attn(Q, K_t, V_t) + ls * attn(Q, K_s, V_s) + lc * attn(Q, K_c, V_c)) W_o`
//! where only the style and color key/value projections (`stream.*`) and the
//! embedders (`embed.*`) are trainable in the stream stage.

use std::ops::Range;

use cdst_tensor::{Axis, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorlab::ColorHistogram;
use crate::edges::EdgeMap;
use crate::embed::{init_embed, EmbedConfig, FeatureStack, TokenKind, TokenSet};
use crate::error::{CdstError, Result};
use crate::params::{Binder, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockRegistry {
    pub total: usize,
    pub encoder: Range<usize>,
    pub middle: Range<usize>,
    pub decoder: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Middle,
    Decoder,
}

impl BlockRegistry {
    pub fn new(encoder: usize, middle: usize, decoder: usize) -> Self {
        Self {
            total: encoder + middle + decoder,
            encoder: 0..encoder,
            middle: encoder..encoder + middle,
            decoder: encoder + middle..encoder + middle + decoder,
        }
    }

    pub fn stage(&self, idx: usize) -> Option<Stage> {
        if self.encoder.contains(&idx) {
            Some(Stage::Encoder)
        } else if self.middle.contains(&idx) {
            Some(Stage::Middle)
        } else if self.decoder.contains(&idx) {
            Some(Stage::Decoder)
        } else {
            None
        }
    }
}

/// Encoder 2x2 + 2x10, middle 10, decoder 3x10 + 3x2.
pub fn build_sdxl_layout() -> BlockRegistry {
    BlockRegistry::new(2 * 2 + 2 * 10, 10, 3 * 10 + 3 * 2)
}

pub const STYLE_LOW_RANGE: Range<usize> = 0..14;
pub const STYLE_HIGH_RANGE: Range<usize> = 44..70;
pub const STYLE_LOW_WEIGHT: f64 = 0.2;
pub const STYLE_HIGH_WEIGHT: f64 = 0.9;
pub const COLOR_WEIGHT: f64 = 1.0;

/// Per-block stream weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionPolicy {
    pub lambda_s: Vec<f64>,
    pub lambda_c: Vec<f64>,
    pub style_active: Vec<bool>,
}

impl InjectionPolicy {
    pub fn new(lambda_s: Vec<f64>, lambda_c: Vec<f64>, style_active: Vec<bool>) -> Result<Self> {
        let p = Self {
            lambda_s,
            lambda_c,
            style_active,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lambda_s.len();
        if self.lambda_c.len() != n || self.style_active.len() != n {
            return Err(CdstError::InvalidParameter("policy vectors differ in length".into()));
        }
        if self.lambda_s.iter().chain(&self.lambda_c).any(|v| !v.is_finite()) {
            return Err(CdstError::InvalidParameter("policy weights must be finite".into()));
        }
        if let Some(i) = (0..n).find(|&i| !self.style_active[i] && self.lambda_s[i] != 0.0) {
            return Err(CdstError::InvalidParameter(format!("block {i} is style-inactive with nonzero weight")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lambda_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda_s.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Style on blocks `[0,14)` at `low` and `[44,70)` at `high`; color at `color` everywhere.
pub fn cdst_policy(registry: &BlockRegistry, low: f64, high: f64, color: f64) -> Result<InjectionPolicy> {
    if registry.total < STYLE_HIGH_RANGE.end {
        return Err(CdstError::InvalidParameter(format!(
            "the inference policy needs at least {} blocks, registry has {}",
            STYLE_HIGH_RANGE.end, registry.total
        )));
    }
    let n = registry.total;
    let weight = |i: usize| {
        if STYLE_LOW_RANGE.contains(&i) {
            low
        } else if STYLE_HIGH_RANGE.contains(&i) {
            high
        } else {
            0.0
        }
    };
    let active = (0..n)
        .map(|i| STYLE_LOW_RANGE.contains(&i) || STYLE_HIGH_RANGE.contains(&i))
        .collect();
    InjectionPolicy::new((0..n).map(weight).collect(), vec![color; n], active)
}

pub fn cdst_inference_policy(registry: &BlockRegistry) -> Result<InjectionPolicy> {
    cdst_policy(registry, STYLE_LOW_WEIGHT, STYLE_HIGH_WEIGHT, COLOR_WEIGHT)
}

/// Every block style-active with unit weights.
pub fn training_policy(registry: &BlockRegistry) -> InjectionPolicy {
    let n = registry.total;
    InjectionPolicy {
        lambda_s: vec![1.0; n],
        lambda_c: vec![1.0; n],
        style_active: vec![true; n],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_channels: usize,
    /// Channel widths at latent resolution, /2 and /4.
    pub widths: [usize; 3],
    pub time_dim: usize,
    pub time_hidden: usize,
    pub cond_hidden: usize,
    pub caption_entries: usize,
    pub embed: EmbedConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: [32, 64, 64],
            time_dim: 64,
            time_hidden: 128,
            cond_hidden: 16,
            caption_entries: 16,
            embed: EmbedConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn d_e(&self) -> usize {
        self.embed.d_e
    }

    /// Caption index reserved for the empty prompt.
    pub fn null_caption(&self) -> usize {
        self.caption_entries - 1
    }
}

/// Names of the per-block stream projections `[d_e, d_block]`.
pub fn stream_names(idx: usize) -> [String; 4] {
    ["ks", "vs", "kc", "vc"].map(|m| format!("stream.{idx}.{m}"))
}

/// Parameters updated by stream-stage training.
pub fn is_stream_trainable(name: &str) -> bool {
    name.starts_with("stream.") || name.starts_with("embed.")
}

/// Channel width of the feature map at attention site `idx`.
fn block_width(cfg: &ModelConfig, idx: usize) -> usize {
    if idx < 4 || idx >= 64 {
        cfg.widths[1]
    } else {
        cfg.widths[2]
    }
}

fn init_res(s: &mut ParamStore, name: &str, ci: usize, co: usize, th: usize, rng: &mut ChaCha8Rng) {
    s.init_norm(&format!("{name}.ln1"), ci);
    s.init_conv(&format!("{name}.conv1"), ci, co, rng);
    s.init_linear(&format!("{name}.temb"), th, co, rng);
    s.init_norm(&format!("{name}.ln2"), co);
    s.init_conv(&format!("{name}.conv2"), co, co, rng);
    if ci != co {
        s.init_linear(&format!("{name}.skip"), ci, co, rng);
    }
}

/// Base network weights: UNet, caption table and conditioning encoder.
pub fn init_base(cfg: &ModelConfig, registry: &BlockRegistry, seed: u64) -> Result<ParamStore> {
    if *registry != build_sdxl_layout() {
        return Err(CdstError::InvalidParameter("the toy UNet implements the SDXL block layout only".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let [w0, w1, w2] = cfg.widths;
    let (lc, th, d_e) = (cfg.latent_channels, cfg.time_hidden, cfg.d_e());
    s.insert("text.table", Tensor::randn(&[cfg.caption_entries, d_e], 1.0, &mut rng));
    s.init_linear("unet.time.w1", cfg.time_dim, th, &mut rng);
    s.insert("unet.time.b1", Tensor::zeros(&[th]));
    s.init_linear("unet.time.w2", th, th, &mut rng);
    s.insert("unet.time.b2", Tensor::zeros(&[th]));

    s.init_conv("unet.conv_in", lc, w0, &mut rng);
    init_res(&mut s, "unet.enc0", w0, w0, th, &mut rng);
    s.init_conv("unet.down1", w0, w1, &mut rng);
    init_res(&mut s, "unet.enc1", w1, w1, th, &mut rng);
    s.init_conv("unet.down2", w1, w2, &mut rng);
    init_res(&mut s, "unet.enc2a", w2, w2, th, &mut rng);
    init_res(&mut s, "unet.enc2b", w2, w2, th, &mut rng);
    init_res(&mut s, "unet.mid_a", w2, w2, th, &mut rng);
    init_res(&mut s, "unet.mid_b", w2, w2, th, &mut rng);
    init_res(&mut s, "unet.dec2a", 2 * w2, w2, th, &mut rng);
    init_res(&mut s, "unet.dec2b", w2, w2, th, &mut rng);
    init_res(&mut s, "unet.dec2c", w2, w2, th, &mut rng);
    init_res(&mut s, "unet.dec1", w2 + w1, w1, th, &mut rng);
    s.init_linear("unet.up0", w1, w0, &mut rng);
    init_res(&mut s, "unet.dec0", w0, w0, th, &mut rng);
    s.init_norm("unet.out_norm", w0);
    s.init_conv("unet.conv_out", w0, lc, &mut rng);

    for idx in 0..registry.total {
        let d = block_width(cfg, idx);
        let p = format!("unet.attn{idx}");
        s.init_norm(&format!("{p}.ln"), d);
        s.init_linear(&format!("{p}.wq"), d, d, &mut rng);
        s.init_linear(&format!("{p}.kt"), d_e, d, &mut rng);
        s.init_linear(&format!("{p}.vt"), d_e, d, &mut rng);
        // Small output projection keeps the 70 residual additions stable at init.
        s.insert(format!("{p}.wo"), Tensor::randn(&[d, d], 0.2 / (d as f64).sqrt(), &mut rng));
    }

    let h = cfg.cond_hidden;
    s.init_conv("cond.c0", 1, h, &mut rng);
    s.init_conv("cond.c1", h, w0, &mut rng);
    s.init_conv("cond.c2", w0, w1, &mut rng);
    s.init_conv("cond.c3", w1, w2, &mut rng);
    for (k, c) in [w0, w1, w2].into_iter().enumerate() {
        s.insert(format!("cond.out{k}"), Tensor::zeros(&[c, c]));
    }
    Ok(s)
}

/// Stream projections for every block, Gaussian with std `1/sqrt(d_e)`.
pub fn init_streams(cfg: &ModelConfig, registry: &BlockRegistry, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for idx in 0..registry.total {
        let d = block_width(cfg, idx);
        for name in stream_names(idx) {
            s.init_linear(&name, cfg.d_e(), d, &mut rng);
        }
    }
    s
}

/// Sinusoidal embedding of timestep `t`, `[1, dim]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(&[1, dim], v).expect("length matches")
}

/// Conditioning tokens placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StreamVars {
    pub text: Var,
    pub style: Option<Var>,
    pub color: Option<Var>,
}

fn linear<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, x: Var, w: &str) -> Result<Var> {
    let wv = p.var(tape, w)?;
    Ok(tape.matmul(x, wv)?)
}

fn linear_b<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = linear(tape, p, x, w)?;
    let bv = p.var(tape, b)?;
    Ok(tape.add_bias(y, bv)?)
}

fn norm<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, x: Var, name: &str) -> Result<Var> {
    let g = p.var(tape, &format!("{name}.g"))?;
    let b = p.var(tape, &format!("{name}.b"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

fn conv<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, x: Var, name: &str, stride: usize) -> Result<Var> {
    let w = p.var(tape, &format!("{name}.w"))?;
    let b = p.var(tape, &format!("{name}.b"))?;
    Ok(tape.conv2d(x, w, b, stride)?)
}

fn res_block<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, x: Var, temb: Var, name: &str) -> Result<Var> {
    let h = norm(tape, p, x, &format!("{name}.ln1"))?;
    let h = tape.gelu(h);
    let h = conv(tape, p, h, &format!("{name}.conv1"), 1)?;
    let tb = linear(tape, p, temb, &format!("{name}.temb"))?;
    let co = *tape.shape(tb).last().expect("rank 2");
    let tb = tape.reshape(tb, &[co])?;
    let h = tape.add_bias(h, tb)?;
    let h = norm(tape, p, h, &format!("{name}.ln2"))?;
    let h = tape.gelu(h);
    let h = conv(tape, p, h, &format!("{name}.conv2"), 1)?;
    let skip = if p.store().contains(&format!("{name}.skip")) {
        linear(tape, p, x, &format!("{name}.skip"))?
    } else {
        x
    };
    Ok(tape.add(skip, h)?)
}

/// One cross-attention site on a `[h, w, c]` (or `[n, c]`) feature map.
///
/// A stream whose weight is exactly zero, or whose tokens are absent, is
/// skipped, so it contributes exactly nothing.
pub fn cross_attention_block<'s>(
    tape: &mut Tape<'s>,
    p: &mut Binder<'s>,
    x: Var,
    streams: StreamVars,
    policy: &InjectionPolicy,
    idx: usize,
) -> Result<Var> {
    if idx >= policy.len() {
        return Err(CdstError::InvalidParameter(format!("block {idx} outside policy of {}", policy.len())));
    }
    let shape = tape.shape(x).to_vec();
    let d = *shape.last().ok_or_else(|| CdstError::Shape("scalar feature map".into()))?;
    let n = tape.value(x).len() / d;
    let pre = format!("unet.attn{idx}");
    let flat = tape.reshape(x, &[n, d])?;
    let h = norm(tape, p, flat, &format!("{pre}.ln"))?;
    let q = linear(tape, p, h, &format!("{pre}.wq"))?;
    let kt = linear(tape, p, streams.text, &format!("{pre}.kt"))?;
    let vt = linear(tape, p, streams.text, &format!("{pre}.vt"))?;
    let mut o = tape.attention(q, kt, vt, d)?;
    let [ks, vs, kc, vc] = stream_names(idx);
    let extra = [
        (streams.style, policy.lambda_s[idx], ks, vs),
        (streams.color, policy.lambda_c[idx], kc, vc),
    ];
    for (tokens, lambda, kn, vn) in extra {
        let Some(e) = tokens else { continue };
        if lambda == 0.0 {
            continue;
        }
        let k = linear(tape, p, e, &kn)?;
        let v = linear(tape, p, e, &vn)?;
        let a = tape.attention(q, k, v, d)?;
        let a = tape.scale(a, lambda);
        o = tape.add(o, a)?;
    }
    let o = linear(tape, p, o, &format!("{pre}.wo"))?;
    let out = tape.add(flat, o)?;
    Ok(tape.reshape(out, &shape)?)
}

/// Conditioning residuals `[32,32,w0]`, `[16,16,w1]`, `[8,8,w2]` from an
/// edge map at twice the latent resolution.
pub fn condition_residuals_on<'s>(
    tape: &mut Tape<'s>,
    p: &mut Binder<'s>,
    edges: &EdgeMap,
    controlnet_weight: f64,
) -> Result<Vec<Var>> {
    let (w, h) = (edges.width(), edges.height());
    if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
        return Err(CdstError::Shape(format!("edge map {w}x{h} must have sides divisible by 8")));
    }
    let e = Tensor::new(&[h, w, 1], edges.data().iter().map(|&v| v as f64).collect())?;
    let e = tape.constant(e);
    let x = tape.avg_pool2x(e)?;
    let x = conv(tape, p, x, "cond.c0", 1)?;
    let x = tape.gelu(x);
    let f0 = conv(tape, p, x, "cond.c1", 1)?;
    let x = tape.gelu(f0);
    let f1 = conv(tape, p, x, "cond.c2", 2)?;
    let x = tape.gelu(f1);
    let f2 = conv(tape, p, x, "cond.c3", 2)?;
    let mut out = Vec::with_capacity(3);
    for (k, f) in [f0, f1, f2].into_iter().enumerate() {
        let r = linear(tape, p, f, &format!("cond.out{k}"))?;
        out.push(tape.scale(r, controlnet_weight));
    }
    Ok(out)
}

/// Noise prediction `[h, w, c]` for a latent `[h, w, c]` with `h`, `w`
/// divisible by 4.
#[allow(clippy::too_many_arguments)]
pub fn unet_forward_on<'s>(
    tape: &mut Tape<'s>,
    p: &mut Binder<'s>,
    cfg: &ModelConfig,
    latent: Var,
    t: usize,
    streams: StreamVars,
    policy: &InjectionPolicy,
    cond: Option<&[Var]>,
) -> Result<Var> {
    let s = tape.shape(latent).to_vec();
    if s.len() != 3 || s[0] % 4 != 0 || s[1] % 4 != 0 || s[0] == 0 || s[1] == 0 || s[2] != cfg.latent_channels {
        return Err(CdstError::Shape(format!("latent {s:?} must be [4a, 4b, {}]", cfg.latent_channels)));
    }
    if policy.len() != 70 {
        return Err(CdstError::InvalidParameter(format!("policy covers {} blocks, need 70", policy.len())));
    }
    if let Some(c) = cond {
        let expect = [[s[0], s[1]], [s[0] / 2, s[1] / 2], [s[0] / 4, s[1] / 4]];
        if c.len() != 3 || c.iter().zip(expect).any(|(&v, e)| tape.shape(v)[..2] != e) {
            return Err(CdstError::Shape("conditioning residuals do not match the latent".into()));
        }
    }
    let residual = |tape: &mut Tape<'s>, x: Var, k: usize| -> Result<Var> {
        match cond {
            Some(c) => Ok(tape.add(x, c[k])?),
            None => Ok(x),
        }
    };

    let te = tape.constant(timestep_embedding(t, cfg.time_dim));
    let te = linear_b(tape, p, te, "unet.time.w1", "unet.time.b1")?;
    let te = tape.gelu(te);
    let temb = linear_b(tape, p, te, "unet.time.w2", "unet.time.b2")?;

    let attn = |tape: &mut Tape<'s>, p: &mut Binder<'s>, mut x: Var, r: Range<usize>| -> Result<Var> {
        for idx in r {
            x = cross_attention_block(tape, p, x, streams, policy, idx)?;
        }
        Ok(x)
    };

    let x = conv(tape, p, latent, "unet.conv_in", 1)?;
    let x = res_block(tape, p, x, temb, "unet.enc0")?;
    let s0 = residual(tape, x, 0)?;

    let x = conv(tape, p, s0, "unet.down1", 2)?;
    let x = res_block(tape, p, x, temb, "unet.enc1")?;
    let x = attn(tape, p, x, 0..4)?;
    let s1 = residual(tape, x, 1)?;

    let x = conv(tape, p, s1, "unet.down2", 2)?;
    let x = res_block(tape, p, x, temb, "unet.enc2a")?;
    let x = attn(tape, p, x, 4..14)?;
    let x = res_block(tape, p, x, temb, "unet.enc2b")?;
    let x = attn(tape, p, x, 14..24)?;
    let s2 = residual(tape, x, 2)?;

    let x = res_block(tape, p, s2, temb, "unet.mid_a")?;
    let x = attn(tape, p, x, 24..34)?;
    let x = res_block(tape, p, x, temb, "unet.mid_b")?;

    let x = tape.concat(&[x, s2], Axis::Last)?;
    let x = res_block(tape, p, x, temb, "unet.dec2a")?;
    let x = attn(tape, p, x, 34..44)?;
    let x = res_block(tape, p, x, temb, "unet.dec2b")?;
    let x = attn(tape, p, x, 44..54)?;
    let x = res_block(tape, p, x, temb, "unet.dec2c")?;
    let x = attn(tape, p, x, 54..64)?;

    let x = tape.upsample2x(x)?;
    let x = tape.concat(&[x, s1], Axis::Last)?;
    let x = res_block(tape, p, x, temb, "unet.dec1")?;
    let x = attn(tape, p, x, 64..70)?;

    let x = linear(tape, p, x, "unet.up0")?;
    let x = tape.upsample2x(x)?;
    let x = tape.add(x, s0)?;
    let x = res_block(tape, p, x, temb, "unet.dec0")?;
    let x = norm(tape, p, x, "unet.out_norm")?;
    let x = tape.gelu(x);
    conv(tape, p, x, "unet.conv_out", 1)
}

/// Caption token `[1, d_e]` as a one-hot row selection of the table.
pub fn caption_on<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, cfg: &ModelConfig, key: usize) -> Result<Var> {
    if key >= cfg.caption_entries {
        return Err(CdstError::InvalidParameter(format!("caption key {key} >= {}", cfg.caption_entries)));
    }
    let mut onehot = Tensor::zeros(&[1, cfg.caption_entries]);
    onehot.data_mut()[key] = 1.0;
    let oh = tape.constant(onehot);
    linear(tape, p, oh, "text.table")
}

/// Base weights, stream projections and embedders in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub registry: BlockRegistry,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let registry = build_sdxl_layout();
        let mut params = init_base(&config, &registry, seed)?;
        params.extend(init_streams(&config, &registry, seed.wrapping_add(1)));
        params.extend(init_embed(&config.embed, seed.wrapping_add(2)));
        Ok(Self {
            config,
            registry,
            params,
        })
    }

    /// Wraps loaded weights after checking every expected entry is present
    /// with the expected shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(CdstError::Shape(format!("{name}: {:?} != {:?}", got.shape(), t.shape())));
            }
        }
        Ok(Self {
            config,
            registry: reference.registry,
            params,
        })
    }

    pub fn caption(&self, key: usize) -> Result<TokenSet> {
        let mut tape = Tape::new();
        let mut p = Binder::frozen(&self.params);
        let v = caption_on(&mut tape, &mut p, &self.config, key)?;
        TokenSet::new(tape.to_tensor(v), TokenKind::Text)
    }

    pub fn style_tokens(&self, stack: &FeatureStack) -> Result<TokenSet> {
        crate::embed::compress_style(stack, &self.params, &self.config.embed)
    }

    pub fn color_tokens(&self, hist: &ColorHistogram) -> Result<TokenSet> {
        crate::embed::embed_color(hist, &self.params, &self.config.embed)
    }

    pub fn condition_residuals(&self, edges: &EdgeMap, controlnet_weight: f64) -> Result<Vec<Tensor>> {
        condition_residuals(edges, &self.params, controlnet_weight)
    }

    /// Noise prediction with frozen weights.
    #[allow(clippy::too_many_arguments)]
    pub fn predict(
        &self,
        latent: &Tensor,
        t: usize,
        e_t: &TokenSet,
        e_s: Option<&TokenSet>,
        e_c: Option<&TokenSet>,
        policy: &InjectionPolicy,
        cond: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        unet_forward(latent, t, e_t, e_s, e_c, &self.params, &self.config, policy, cond)
    }
}

fn check_tokens(set: &TokenSet, kind: TokenKind, d_e: usize) -> Result<()> {
    if set.kind() != kind || set.width() != d_e {
        return Err(CdstError::Shape(format!(
            "expected {kind:?} tokens of width {d_e}, got {:?} of width {}",
            set.kind(),
            set.width()
        )));
    }
    Ok(())
}

/// Frozen-weight forward pass. `weights` holds base and stream projections.
#[allow(clippy::too_many_arguments)]
pub fn unet_forward(
    latent: &Tensor,
    t: usize,
    e_t: &TokenSet,
    e_s: Option<&TokenSet>,
    e_c: Option<&TokenSet>,
    weights: &ParamStore,
    cfg: &ModelConfig,
    policy: &InjectionPolicy,
    cond: Option<&[Tensor]>,
) -> Result<Tensor> {
    let d_e = cfg.d_e();
    check_tokens(e_t, TokenKind::Text, d_e)?;
    if let Some(s) = e_s {
        check_tokens(s, TokenKind::Style, d_e)?;
    }
    if let Some(c) = e_c {
        check_tokens(c, TokenKind::Color, d_e)?;
    }
    let mut tape = Tape::new();
    let mut p = Binder::frozen(weights);
    let x = tape.leaf(latent, false);
    let streams = StreamVars {
        text: tape.leaf(e_t.tokens(), false),
        style: e_s.map(|s| tape.leaf(s.tokens(), false)),
        color: e_c.map(|c| tape.leaf(c.tokens(), false)),
    };
    let cond_vars: Option<Vec<Var>> = cond.map(|c| c.iter().map(|r| tape.leaf(r, false)).collect());
    let out = unet_forward_on(&mut tape, &mut p, cfg, x, t, streams, policy, cond_vars.as_deref())?;
    Ok(tape.to_tensor(out))
}

pub fn condition_residuals(edges: &EdgeMap, weights: &ParamStore, controlnet_weight: f64) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let mut p = Binder::frozen(weights);
    let rs = condition_residuals_on(&mut tape, &mut p, edges, controlnet_weight)?;
    Ok(rs.into_iter().map(|v| tape.to_tensor(v)).collect())
}
