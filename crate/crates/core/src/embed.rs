//! Style and color embeddings.
//!
//! The style stream sees only a greyscale image: a frozen convolutional
//! extractor yields per-block feature grids, shallow grids are pooled to one
//! token each and the deep grid is compressed to four tokens by a small
//! query transformer. The color stream maps a 180-bin histogram to four
//! tokens with an MLP.

use cdst_tensor::{Axis, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::colorlab::{ColorHistogram, ColorSpace, ImageBuffer, PALETTE_BINS};
use crate::error::{CdstError, Result};
use crate::params::{Binder, ParamStore};

const LN_EPS: f64 = 1e-5;

pub const STYLE_TOKENS: usize = 7;
pub const COLOR_TOKENS: usize = 4;
pub const DEEP_TOKENS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorSpec {
    pub blocks: usize,
    pub shallow_taps: Vec<usize>,
    pub deep_tap: usize,
    pub channels: usize,
}

impl ExtractorSpec {
    /// Eight-block toy extractor tapped at blocks 1, 3, 5 and 7.
    pub fn toy() -> Self {
        Self {
            blocks: 8,
            shallow_taps: vec![1, 3, 5],
            deep_tap: 7,
            channels: 32,
        }
    }

    /// Tap layout of a 50-block vision transformer, for imported features.
    pub fn full_scale(channels: usize) -> Self {
        Self {
            blocks: 50,
            shallow_taps: vec![5, 11, 17],
            deep_tap: 49,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = self.shallow_taps.windows(2).all(|w| w[0] < w[1]);
        let below_deep = self.shallow_taps.iter().all(|&t| t < self.deep_tap);
        if self.blocks == 0 || self.deep_tap + 1 != self.blocks || !increasing || !below_deep || self.channels == 0 {
            return Err(CdstError::InvalidParameter(format!("inconsistent extractor spec {self:?}")));
        }
        Ok(())
    }
}

/// Per-block feature grids `[h*w, c]` in ascending block order; the last
/// grid is the deep one.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub grids: Vec<(usize, Tensor)>,
    pub cls: Option<Tensor>,
}

impl FeatureStack {
    pub fn new(grids: Vec<(usize, Tensor)>, cls: Option<Tensor>) -> Result<Self> {
        let bad = |m: &str| Err(CdstError::Shape(format!("feature stack: {m}")));
        if grids.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("block indices must be strictly increasing");
        }
        let Some(c) = grids.first().map(|(_, g)| g.shape().last().copied().unwrap_or(0)) else {
            return Ok(Self { grids, cls });
        };
        if grids.iter().any(|(_, g)| g.shape().len() != 2 || g.shape()[1] != c) {
            return bad("grids must be [n, c] with a shared c");
        }
        if cls.as_ref().is_some_and(|t| t.shape() != [c]) {
            return bad("cls must be [c]");
        }
        Ok(Self { grids, cls })
    }

    pub fn channels(&self) -> Option<usize> {
        self.grids.first().map(|(_, g)| g.shape()[1])
    }

    /// Entries named `grid.<block>` and `cls`.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (b, g) in &self.grids {
            s.insert(format!("grid.{b}"), g.clone());
        }
        if let Some(c) = &self.cls {
            s.insert("cls", c.clone());
        }
        s
    }

    /// Inverse of [`FeatureStack::to_store`]; other names are rejected.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut grids = Vec::new();
        let mut cls = None;
        for (name, t) in store.iter() {
            if name == "cls" {
                cls = Some(t.clone());
            } else if let Some(b) = name.strip_prefix("grid.").and_then(|b| b.parse::<usize>().ok()) {
                grids.push((b, t.clone()));
            } else {
                return Err(CdstError::InvalidParameter(format!("unexpected feature entry {name:?}")));
            }
        }
        grids.sort_by_key(|(b, _)| *b);
        Self::new(grids, cls)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Style,
    Color,
    Text,
}

/// Token embeddings `[n, d_e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    tokens: Tensor,
    kind: TokenKind,
}

impl TokenSet {
    pub fn new(tokens: Tensor, kind: TokenKind) -> Result<Self> {
        let s = tokens.shape();
        let expected = match kind {
            TokenKind::Style => Some(STYLE_TOKENS),
            TokenKind::Color => Some(COLOR_TOKENS),
            TokenKind::Text => None,
        };
        if s.len() != 2 || s[0] == 0 || expected.is_some_and(|n| n != s[0]) {
            return Err(CdstError::Shape(format!("{kind:?} token set with shape {s:?}")));
        }
        Ok(Self { tokens, kind })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

fn stride_plan(spec: &ExtractorSpec, h: usize, w: usize) -> Vec<usize> {
    let (mut h, mut w) = (h, w);
    (0..spec.blocks)
        .map(|i| {
            if i % 2 == 0 && h > 8 && w > 8 && h % 2 == 0 && w % 2 == 0 {
                h /= 2;
                w /= 2;
                2
            } else {
                1
            }
        })
        .collect()
}

/// Seed of the frozen extractor every model shares.
pub const EXTRACTOR_SEED: u64 = 0x00c0_10b1_1d00;

/// Frozen features of the greyscale version of an sRGB image.
pub fn image_features(img: &ImageBuffer) -> Result<FeatureStack> {
    toy_features(&crate::colorlab::greyscale(img)?, &ExtractorSpec::toy(), EXTRACTOR_SEED)
}

/// Deterministic frozen random-weight conv stack over a greyscale image.
///
/// Blocks are `gelu(conv3x3(x))`; even blocks halve the resolution while it
/// exceeds 8. The cls vector is the mean of the deep grid.
pub fn toy_features(grey: &ImageBuffer, spec: &ExtractorSpec, frozen_seed: u64) -> Result<FeatureStack> {
    if grey.space() != ColorSpace::Grey {
        return Err(CdstError::InvalidImage(format!(
            "style features need a greyscale image, got {:?}",
            grey.space()
        )));
    }
    if grey.is_empty() {
        return Err(CdstError::EmptyImage);
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(frozen_seed);
    let c = spec.channels;
    let mut weights = Vec::with_capacity(spec.blocks);
    for i in 0..spec.blocks {
        let ci = if i == 0 { 1 } else { c };
        let w = Tensor::randn(&[3, 3, ci, c], (2.0 / (9 * ci) as f64).sqrt(), &mut rng);
        let b = Tensor::randn(&[c], 0.1, &mut rng);
        weights.push((w, b));
    }
    let strides = stride_plan(spec, grey.height(), grey.width());
    let input = Tensor::new(
        &[grey.height(), grey.width(), 1],
        grey.data().iter().map(|v| 2.0 * v - 1.0).collect(),
    )?;
    let mut tape = Tape::new();
    let mut x = tape.constant(input);
    let mut grids = Vec::new();
    for (i, ((w, b), &stride)) in weights.iter().zip(&strides).enumerate() {
        let (wv, bv) = (tape.leaf(w, false), tape.leaf(b, false));
        let conv = tape.conv2d(x, wv, bv, stride)?;
        x = tape.gelu(conv);
        if spec.shallow_taps.contains(&i) || i == spec.deep_tap {
            let s = tape.shape(x);
            let grid = Tensor::new(&[s[0] * s[1], s[2]], tape.value(x).to_vec())?;
            grids.push((i, grid));
        }
    }
    let deep = tape.reshape(x, &[tape.value(x).len() / c, c])?;
    let cls = tape.mean_rows(deep);
    FeatureStack::new(grids, Some(tape.to_tensor(cls)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub d_e: usize,
    pub feature_channels: usize,
    pub shallow_grids: usize,
    pub shallow_hidden: usize,
    pub deep_layers: usize,
    pub color_hidden: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            d_e: 64,
            feature_channels: 32,
            shallow_grids: 3,
            shallow_hidden: 64,
            deep_layers: 2,
            color_hidden: 256,
        }
    }
}

/// Fresh trainable embedding weights, all named `embed.*`.
pub fn init_embed(cfg: &EmbedConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (c, d) = (cfg.feature_channels, cfg.d_e);
    for j in 0..cfg.shallow_grids {
        let p = format!("embed.style.shallow{j}");
        s.init_linear(&format!("{p}.w1"), c, cfg.shallow_hidden, &mut rng);
        s.insert(format!("{p}.b1"), Tensor::zeros(&[cfg.shallow_hidden]));
        s.init_linear(&format!("{p}.w2"), cfg.shallow_hidden, d, &mut rng);
        s.insert(format!("{p}.b2"), Tensor::zeros(&[d]));
    }
    s.init_linear("embed.style.deep.in.w", c, d, &mut rng);
    s.insert("embed.style.deep.in.b", Tensor::zeros(&[d]));
    s.insert("embed.style.deep.queries", Tensor::randn(&[DEEP_TOKENS, d], 1.0, &mut rng));
    for l in 0..cfg.deep_layers {
        let p = format!("embed.style.deep.l{l}");
        s.init_norm(&format!("{p}.ln_q"), d);
        s.init_norm(&format!("{p}.ln_kv"), d);
        for m in ["wq", "wk", "wv", "wo"] {
            s.init_linear(&format!("{p}.{m}"), d, d, &mut rng);
        }
        s.init_norm(&format!("{p}.ln_ff"), d);
        s.init_linear(&format!("{p}.ff1"), d, 2 * d, &mut rng);
        s.insert(format!("{p}.ff1b"), Tensor::zeros(&[2 * d]));
        s.init_linear(&format!("{p}.ff2"), 2 * d, d, &mut rng);
        s.insert(format!("{p}.ff2b"), Tensor::zeros(&[d]));
    }
    s.init_norm("embed.style.out", d);
    // Histogram inputs are sparse with entries near 1/k, hence unit-scale weights.
    s.insert("embed.color.w1", Tensor::randn(&[PALETTE_BINS, cfg.color_hidden], 1.0, &mut rng));
    s.insert("embed.color.b1", Tensor::zeros(&[cfg.color_hidden]));
    s.init_linear("embed.color.w2", cfg.color_hidden, COLOR_TOKENS * d, &mut rng);
    s.insert("embed.color.b2", Tensor::zeros(&[COLOR_TOKENS * d]));
    s.init_norm("embed.color.out", d);
    s
}

fn linear<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = p.var(tape, w)?;
    let bv = p.var(tape, b)?;
    let y = tape.matmul(x, wv)?;
    Ok(tape.add_bias(y, bv)?)
}

fn norm<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, x: Var, name: &str) -> Result<Var> {
    let g = p.var(tape, &format!("{name}.g"))?;
    let b = p.var(tape, &format!("{name}.b"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

fn mat<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, x: Var, w: &str) -> Result<Var> {
    let wv = p.var(tape, w)?;
    Ok(tape.matmul(x, wv)?)
}

/// Style tokens `[7, d_e]` on `tape`: shallow tokens in block order, then
/// the four deep tokens.
pub fn style_tokens_on<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, stack: &FeatureStack, cfg: &EmbedConfig) -> Result<Var> {
    let Some(((_, deep), shallow)) = stack.grids.split_last() else {
        return Err(CdstError::InvalidParameter("feature stack has no deep grid".into()));
    };
    if shallow.len() != cfg.shallow_grids {
        return Err(CdstError::Shape(format!(
            "expected {} shallow grids, got {}",
            cfg.shallow_grids,
            shallow.len()
        )));
    }
    if stack.channels() != Some(cfg.feature_channels) {
        return Err(CdstError::Shape(format!("feature width {:?} != {}", stack.channels(), cfg.feature_channels)));
    }
    let mut tokens = Vec::with_capacity(STYLE_TOKENS);
    for (j, (_, g)) in shallow.iter().enumerate() {
        let pre = format!("embed.style.shallow{j}");
        let x = tape.constant(g.clone());
        let h = linear(tape, p, x, &format!("{pre}.w1"), &format!("{pre}.b1"))?;
        let h = tape.gelu(h);
        let h = linear(tape, p, h, &format!("{pre}.w2"), &format!("{pre}.b2"))?;
        let pooled = tape.mean_rows(h);
        tokens.push(tape.reshape(pooled, &[1, cfg.d_e])?);
    }

    let mut seq = Vec::new();
    if let Some(cls) = &stack.cls {
        let c = tape.constant(cls.clone());
        seq.push(tape.reshape(c, &[1, cfg.feature_channels])?);
    }
    seq.push(tape.constant(deep.clone()));
    let x = tape.concat(&seq, Axis::First)?;
    let kv = linear(tape, p, x, "embed.style.deep.in.w", "embed.style.deep.in.b")?;
    let mut q = p.var(tape, "embed.style.deep.queries")?;
    for l in 0..cfg.deep_layers {
        let pre = format!("embed.style.deep.l{l}");
        let qn = norm(tape, p, q, &format!("{pre}.ln_q"))?;
        let kvn = norm(tape, p, kv, &format!("{pre}.ln_kv"))?;
        let qq = mat(tape, p, qn, &format!("{pre}.wq"))?;
        let kk = mat(tape, p, kvn, &format!("{pre}.wk"))?;
        let vv = mat(tape, p, kvn, &format!("{pre}.wv"))?;
        let a = tape.attention(qq, kk, vv, cfg.d_e)?;
        let a = mat(tape, p, a, &format!("{pre}.wo"))?;
        q = tape.add(q, a)?;
        let f = norm(tape, p, q, &format!("{pre}.ln_ff"))?;
        let f = linear(tape, p, f, &format!("{pre}.ff1"), &format!("{pre}.ff1b"))?;
        let f = tape.gelu(f);
        let f = linear(tape, p, f, &format!("{pre}.ff2"), &format!("{pre}.ff2b"))?;
        q = tape.add(q, f)?;
    }
    tokens.push(q);
    let all = tape.concat(&tokens, Axis::First)?;
    norm(tape, p, all, "embed.style.out")
}

/// Color tokens `[4, d_e]` on `tape`.
pub fn color_tokens_on<'s>(tape: &mut Tape<'s>, p: &mut Binder<'s>, hist: &ColorHistogram, cfg: &EmbedConfig) -> Result<Var> {
    hist.validate()?;
    if hist.bins.len() != PALETTE_BINS {
        return Err(CdstError::InvalidHistogram(format!("{} bins, expected {PALETTE_BINS}", hist.bins.len())));
    }
    let x = tape.constant(Tensor::new(&[1, PALETTE_BINS], hist.bins.clone())?);
    let h = linear(tape, p, x, "embed.color.w1", "embed.color.b1")?;
    let h = tape.gelu(h);
    let h = linear(tape, p, h, "embed.color.w2", "embed.color.b2")?;
    let t = tape.reshape(h, &[COLOR_TOKENS, cfg.d_e])?;
    norm(tape, p, t, "embed.color.out")
}

pub fn compress_style(stack: &FeatureStack, weights: &ParamStore, cfg: &EmbedConfig) -> Result<TokenSet> {
    let mut tape = Tape::new();
    let mut p = Binder::frozen(weights);
    let v = style_tokens_on(&mut tape, &mut p, stack, cfg)?;
    TokenSet::new(tape.to_tensor(v), TokenKind::Style)
}

pub fn embed_color(hist: &ColorHistogram, weights: &ParamStore, cfg: &EmbedConfig) -> Result<TokenSet> {
    let mut tape = Tape::new();
    let mut p = Binder::frozen(weights);
    let v = color_tokens_on(&mut tape, &mut p, hist, cfg)?;
    TokenSet::new(tape.to_tensor(v), TokenKind::Color)
}
