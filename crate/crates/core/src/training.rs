//! Synthetic factorized textures and reconstruction training.
//!
//! Training runs in two phases over one parameter store. The base phase fits
//! the UNet, caption table and edge encoder with text and edge conditioning
//! only. The stream phase freezes all of that and fits the style and color
//! projections plus both embedders with every stream active in every block.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use cdst_tensor::{adamw_step, AdamWConfig, OptimizerState, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::encode;
use crate::colorlab::{build_palette, extract_histogram, luma, ColorHistogram, ColorSpace, ImageBuffer, DEFAULT_PALETTE, PALETTE_BINS};
use crate::denoiser::{
    caption_on, condition_residuals_on, is_stream_trainable, training_policy, unet_forward_on, Model, ModelConfig,
    StreamVars,
};
use crate::edges::{canny, EdgeMap, DEFAULT_HIGH, DEFAULT_LOW, DEFAULT_SIGMA};
use crate::embed::{color_tokens_on, image_features, style_tokens_on, FeatureStack};
use crate::error::{CdstError, Result};
use crate::params::{Binder, ParamStore};
use crate::sampler::{default_schedule, DiffusionSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureFamily {
    Stripes,
    Dots,
    Checker,
    Waves,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 4] = [Self::Stripes, Self::Dots, Self::Checker, Self::Waves];

    pub fn id(self) -> usize {
        self as usize
    }

    /// Caption table row naming this family.
    pub fn caption_key(self) -> usize {
        self.id()
    }
}

/// Procedural intensity field parameters. Frequencies count cycles across
/// the image; angles are radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub family: TextureFamily,
    pub frequency: f64,
    pub angle: f64,
    pub thickness: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub texture: TextureParams,
    /// Colors of the intensity bands from lowest to highest.
    pub palette: Vec<[f64; 3]>,
    pub size: usize,
}

pub const MIN_PALETTE_COLORS: usize = 2;
pub const MAX_PALETTE_COLORS: usize = 4;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.palette.len();
        if !(MIN_PALETTE_COLORS..=MAX_PALETTE_COLORS).contains(&k) {
            return Err(CdstError::InvalidParameter(format!("palette needs 2..=4 colors, got {k}")));
        }
        if self.size < 8 || self.size % 8 != 0 {
            return Err(CdstError::InvalidParameter(format!("size {} must be a positive multiple of 8", self.size)));
        }
        if self.palette.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(CdstError::InvalidParameter("palette colors must lie in [0, 1]".into()));
        }
        let t = &self.texture;
        if ![t.frequency, t.angle, t.thickness, t.phase].iter().all(|v| v.is_finite()) || t.frequency <= 0.0 {
            return Err(CdstError::InvalidParameter("texture parameters must be finite, frequency positive".into()));
        }
        Ok(())
    }
}

fn intensity(t: &TextureParams, u: f64, v: f64) -> f64 {
    let (s, c) = t.angle.sin_cos();
    let a = 2.0 * PI * t.frequency * (u * c + v * s);
    let b = 2.0 * PI * t.frequency * (v * c - u * s);
    let p = t.phase;
    match t.family {
        TextureFamily::Stripes => (a + p).sin() + t.thickness * (2.0 * (a + p)).sin(),
        TextureFamily::Dots => (a + p).cos() + (b + p).cos() + t.thickness * (a + p).cos() * (b + p).cos(),
        TextureFamily::Checker => {
            let (sa, sb) = ((a + p).sin(), (b + p).sin());
            sa * sb + 0.25 * t.thickness * sa
        }
        TextureFamily::Waves => (a + (1.0 + 2.0 * t.thickness) * (0.5 * b).sin() + p).sin(),
    }
}

/// Texture at half resolution, banded into equal-area palette regions by
/// intensity rank (ties by position), then repeated 2x2.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<ImageBuffer> {
    spec.validate()?;
    let g = spec.size / 2;
    let n = g * g;
    let field: Vec<f64> = (0..n)
        .map(|i| intensity(&spec.texture, ((i % g) as f64 + 0.5) / g as f64, ((i / g) as f64 + 0.5) / g as f64))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[a].total_cmp(&field[b]).then(a.cmp(&b)));
    let k = spec.palette.len();
    let mut band = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        band[i] = rank * k / n;
    }
    let size = spec.size;
    let data = (0..size * size)
        .flat_map(|i| spec.palette[band[(i / size / 2) * g + (i % size) / 2]])
        .collect();
    ImageBuffer::new(size, size, ColorSpace::Srgb, data)
}

/// Random texture parameters for `family`.
pub fn random_texture(family: TextureFamily, rng: &mut impl Rng) -> TextureParams {
    TextureParams {
        family,
        frequency: rng.random_range(1.5..3.5),
        angle: rng.random_range(0.0..PI),
        thickness: rng.random_range(0.0..0.5),
        phase: rng.random_range(0.0..2.0 * PI),
    }
}

/// Minimum LAB distance between colors of one generated palette.
pub const MIN_PALETTE_SEPARATION: f64 = 25.0;

/// `k` distinct palette indices from `pool`, pairwise at least
/// `MIN_PALETTE_SEPARATION` apart in LAB and disjoint from `exclude`.
pub fn random_palette_ids(pool: &[usize], k: usize, exclude: &[usize], rng: &mut impl Rng) -> Result<Vec<usize>> {
    let palette = build_palette(DEFAULT_PALETTE)?;
    let lab = palette.entries();
    let candidates: Vec<usize> = pool.iter().copied().filter(|i| !exclude.contains(i)).collect();
    if candidates.len() < k || candidates.iter().any(|&i| i >= PALETTE_BINS) {
        return Err(CdstError::InvalidParameter(format!("cannot draw {k} colors from a pool of {}", candidates.len())));
    }
    for _ in 0..1000 {
        let mut ids: Vec<usize> = Vec::with_capacity(k);
        for _ in 0..8 * k {
            if ids.len() == k {
                break;
            }
            let c = candidates[rng.random_range(0..candidates.len())];
            let far = ids.iter().all(|&j| dist3(&lab[c], &lab[j]) >= MIN_PALETTE_SEPARATION);
            if !ids.contains(&c) && far {
                ids.push(c);
            }
        }
        if ids.len() == k {
            return Ok(ids);
        }
    }
    Err(CdstError::InvalidParameter(format!("could not draw {k} separated colors from a pool of {}", candidates.len())))
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// sRGB colors of palette entries.
pub fn palette_colors(ids: &[usize]) -> Result<Vec<[f64; 3]>> {
    let palette = build_palette(DEFAULT_PALETTE)?;
    ids.iter()
        .map(|&i| {
            palette
                .srgb()
                .get(i)
                .copied()
                .ok_or_else(|| CdstError::InvalidParameter(format!("palette index {i} >= {PALETTE_BINS}")))
        })
        .collect()
}

/// Indices sorted by ascending luma of their palette color.
pub fn luma_ordered(ids: &[usize]) -> Result<Vec<usize>> {
    let cols = palette_colors(ids)?;
    let mut pairs: Vec<(f64, usize)> = cols.iter().map(|c| luma(c)).zip(ids.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(pairs.into_iter().map(|(_, i)| i).collect())
}

fn default_families() -> Vec<TextureFamily> {
    TextureFamily::ALL.to_vec()
}

fn full_pool() -> Vec<usize> {
    (0..PALETTE_BINS).collect()
}

fn default_sizes() -> Vec<usize> {
    vec![2, 3, 4]
}

fn default_image_size() -> usize {
    64
}

/// Dataset description; deserializes from the `[dataset]` table of a
/// recipe file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_families")]
    pub families: Vec<TextureFamily>,
    /// Palette entries colors may be drawn from.
    #[serde(default = "full_pool")]
    pub palette_pool: Vec<usize>,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_sizes")]
    pub palette_sizes: Vec<usize>,
    #[serde(default = "default_image_size")]
    pub size: usize,
}

impl DatasetSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            families: default_families(),
            palette_pool: full_pool(),
            count,
            seed,
            palette_sizes: default_sizes(),
            size: default_image_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CdstError::InvalidParameter(m));
        if self.families.is_empty() || self.palette_sizes.is_empty() {
            return bad("families and palette_sizes must be non-empty".into());
        }
        if let Some(i) = self.palette_pool.iter().find(|&&i| i >= PALETTE_BINS) {
            return bad(format!("palette_pool entry {i} >= {PALETTE_BINS}"));
        }
        if let Some(k) = self.palette_sizes.iter().find(|k| !(MIN_PALETTE_COLORS..=MAX_PALETTE_COLORS).contains(*k)) {
            return bad(format!("palette size {k} outside 2..=4"));
        }
        if self.palette_pool.len() < *self.palette_sizes.iter().max().unwrap_or(&0) {
            return bad("palette_pool smaller than the largest palette".into());
        }
        if self.size < 8 || self.size % 8 != 0 {
            return bad(format!("size {} must be a positive multiple of 8", self.size));
        }
        Ok(())
    }
}

/// One generated example with the ids it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub spec: SynthSpec,
    pub palette_ids: Vec<usize>,
    pub image: ImageBuffer,
}

impl SynthItem {
    pub fn family(&self) -> TextureFamily {
        self.spec.texture.family
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Item `index` of the dataset. Texture and palette come from separate
/// random streams, so they are independent by construction.
pub fn dataset_item(ds: &DatasetSpec, index: usize) -> Result<SynthItem> {
    let mut tex_rng = stream_rng(ds.seed, 2 * index as u64);
    let mut pal_rng = stream_rng(ds.seed, 2 * index as u64 + 1);
    let family = ds.families[tex_rng.random_range(0..ds.families.len())];
    let texture = random_texture(family, &mut tex_rng);
    let k = ds.palette_sizes[pal_rng.random_range(0..ds.palette_sizes.len())];
    let palette_ids = random_palette_ids(&ds.palette_pool, k, &[], &mut pal_rng)?;
    let spec = SynthSpec {
        texture,
        palette: palette_colors(&palette_ids)?,
        size: ds.size,
    };
    let image = gen_synthetic(&spec)?;
    Ok(SynthItem {
        spec,
        palette_ids,
        image,
    })
}

pub fn generate_dataset(ds: &DatasetSpec) -> Result<Vec<SynthItem>> {
    ds.validate()?;
    (0..ds.count).map(|i| dataset_item(ds, i)).collect()
}

/// Which parameter group a training run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Streams,
}

fn base_trainable(name: &str) -> bool {
    !is_stream_trainable(name)
}

impl Phase {
    pub fn trainable(self) -> &'static dyn Fn(&str) -> bool {
        match self {
            Phase::Base => &base_trainable,
            Phase::Streams => &is_stream_trainable,
        }
    }
}

fn one() -> usize {
    1
}

fn default_weight_decay() -> f64 {
    1e-2
}

fn default_text_dropout() -> f64 {
    0.1
}

fn default_cond_dropout() -> f64 {
    0.5
}

/// Optimizer-step recipe. Each step averages gradients over
/// `batch * accum` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub accum: usize,
    /// Probability of swapping the caption for the null caption.
    #[serde(default = "default_text_dropout")]
    pub text_dropout: f64,
    /// Probability of omitting edge conditioning; base phase only.
    #[serde(default = "default_cond_dropout")]
    pub cond_dropout: f64,
}

impl TrainConfig {
    /// Stream-phase toy recipe: 2000 steps of batch 8 at lr 1e-3.
    pub fn toy_streams(seed: u64) -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            weight_decay: default_weight_decay(),
            seed,
            accum: 1,
            text_dropout: default_text_dropout(),
            cond_dropout: 0.0,
        }
    }

    /// Base-phase toy recipe.
    pub fn toy_base(seed: u64) -> Self {
        Self {
            steps: 1500,
            batch: 4,
            lr: 1e-3,
            weight_decay: default_weight_decay(),
            seed,
            accum: 1,
            text_dropout: default_text_dropout(),
            cond_dropout: default_cond_dropout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.steps == 0 || self.batch == 0 || self.accum == 0 {
            return Err(CdstError::InvalidParameter("steps, batch and accum must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CdstError::InvalidParameter("lr must be positive and weight_decay non-negative".into()));
        }
        if !prob(self.text_dropout) || !prob(self.cond_dropout) {
            return Err(CdstError::InvalidParameter("dropout probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn samples_per_step(&self) -> usize {
        self.batch * self.accum
    }
}

/// Training-time view of one dataset image.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub image: ImageBuffer,
    pub latent: Tensor,
    pub caption: usize,
    /// Frozen-extractor output, histogram and edges are fixed per image,
    /// so they are computed once here rather than per sample.
    pub features: FeatureStack,
    pub histogram: ColorHistogram,
    pub edges: EdgeMap,
}

impl TrainExample {
    pub fn new(image: ImageBuffer, caption: usize) -> Result<Self> {
        Ok(Self {
            latent: encode(&image)?,
            features: image_features(&image)?,
            histogram: extract_histogram(&image, &build_palette(DEFAULT_PALETTE)?)?,
            edges: canny(&image, DEFAULT_LOW, DEFAULT_HIGH, DEFAULT_SIGMA)?,
            image,
            caption,
        })
    }

    pub fn from_item(item: &SynthItem) -> Result<Self> {
        Self::new(item.image.clone(), item.family().caption_key())
    }
}

/// Per-sample random choices, drawn in a fixed order.
struct SampleDraw {
    example: usize,
    t: usize,
    drop_text: bool,
    drop_cond: bool,
    eps: Tensor,
}

fn draw(rng: &mut ChaCha8Rng, n_examples: usize, cfg: &TrainConfig, sched: &DiffusionSchedule, shape: &[usize]) -> SampleDraw {
    let example = rng.random_range(0..n_examples);
    let t = rng.random_range(1..=sched.total_steps());
    let drop_text = rng.random::<f64>() < cfg.text_dropout;
    let drop_cond = rng.random::<f64>() < cfg.cond_dropout;
    let eps = Tensor::randn(shape, 1.0, rng);
    SampleDraw {
        example,
        t,
        drop_text,
        drop_cond,
        eps,
    }
}

/// Noise-prediction loss of one example on its own tape, with gradients of
/// the phase's trainable parameters added into `acc`.
#[allow(clippy::too_many_arguments)]
fn sample_loss(
    model: &Model,
    phase: Phase,
    ex: &TrainExample,
    d: &SampleDraw,
    sched: &DiffusionSchedule,
    names: &[String],
    acc: &mut [Vec<f64>],
) -> Result<f64> {
    let cfg: &ModelConfig = &model.config;
    let ab = sched.alpha_bar(d.t);
    let x_t = ex.latent.lin_comb(ab.sqrt(), &d.eps, (1.0 - ab).sqrt())?;
    let mut tape = Tape::new();
    let mut p = Binder::new(&model.params, phase.trainable());
    let x = tape.constant(x_t);
    let key = if d.drop_text { cfg.null_caption() } else { ex.caption };
    let text = caption_on(&mut tape, &mut p, cfg, key)?;
    let policy = training_policy(&model.registry);
    let (streams, cond) = match phase {
        Phase::Streams => {
            let style = style_tokens_on(&mut tape, &mut p, &ex.features, &cfg.embed)?;
            let color = color_tokens_on(&mut tape, &mut p, &ex.histogram, &cfg.embed)?;
            let s = StreamVars {
                text,
                style: Some(style),
                color: Some(color),
            };
            (s, None)
        }
        Phase::Base => {
            let s = StreamVars {
                text,
                style: None,
                color: None,
            };
            let cond = if d.drop_cond {
                None
            } else {
                Some(condition_residuals_on(&mut tape, &mut p, &ex.edges, 1.0)?)
            };
            (s, cond)
        }
    };
    let pred = unet_forward_on(&mut tape, &mut p, cfg, x, d.t, streams, &policy, cond.as_deref())?;
    let target = tape.constant(d.eps.clone());
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    for (name, g) in p.gradients(&grads) {
        let i = names.binary_search_by(|n| n.as_str().cmp(name)).map_err(|_| {
            CdstError::InvalidParameter(format!("gradient for {name} outside the trainable set"))
        })?;
        acc[i].iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok(value)
}

/// Optimizer state and bookkeeping for one phase.
pub struct Trainer {
    pub phase: Phase,
    pub config: TrainConfig,
    sched: DiffusionSchedule,
    /// Trainable names, sorted; optimizer slots follow this order.
    names: Vec<String>,
    state: OptimizerState,
    step: usize,
}

impl Trainer {
    pub fn new(model: &Model, phase: Phase, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut names = model.params.select(phase.trainable());
        names.sort();
        let adam = AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        let tensors: Vec<&Tensor> = names.iter().map(|n| model.params.get(n)).collect::<Result<_>>()?;
        let state = OptimizerState::new(adam, tensors);
        Ok(Self {
            phase,
            config,
            sched: default_schedule(),
            names,
            state,
            step: 0,
        })
    }

    pub fn trainable_names(&self) -> &[String] {
        &self.names
    }

    /// Optimizer steps taken so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimizer step over `batch * accum` samples drawn from
    /// `examples`; returns their mean loss. Sample `j` of step `s` draws
    /// from its own random stream, so the result does not depend on how
    /// samples are grouped into micro-batches.
    pub fn train_step(&mut self, model: &mut Model, examples: &[TrainExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(CdstError::InvalidParameter("empty training set".into()));
        }
        let step = self.step;
        let n = self.config.samples_per_step();
        let mut acc: Vec<Vec<f64>> = self
            .names
            .iter()
            .map(|nm| model.params.get(nm).map(|t| vec![0.0; t.numel()]))
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        for micro in 0..self.config.accum {
            for b in 0..self.config.batch {
                let j = micro * self.config.batch + b;
                let mut rng = stream_rng(self.config.seed, ((step as u64) << 20) | j as u64);
                let d = draw(&mut rng, examples.len(), &self.config, &self.sched, examples[0].latent.shape());
                let loss = sample_loss(model, self.phase, &examples[d.example], &d, &self.sched, &self.names, &mut acc)?;
                if !loss.is_finite() {
                    return Err(CdstError::NonFiniteLoss {
                        step: step + 1,
                        detail: format!("sample {j} (example {}, t = {}) gave {loss}", d.example, d.t),
                    });
                }
                total += loss;
            }
        }
        let inv = 1.0 / n as f64;
        acc.iter_mut().flatten().for_each(|g| *g *= inv);
        let grads: Vec<&[f64]> = acc.iter().map(Vec::as_slice).collect();
        let mut params = model.params.get_many_mut(&self.names)?;
        adamw_step(&mut params, &grads, &mut self.state)?;
        self.step += 1;
        Ok(total * inv)
    }
}

/// Runs `config.steps` optimizer steps; `on_step(step, loss)` sees each
/// 1-based step. Returns the per-step losses.
pub fn train_phase(
    model: &mut Model,
    phase: Phase,
    config: &TrainConfig,
    examples: &[TrainExample],
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let mut trainer = Trainer::new(model, phase, config.clone())?;
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let loss = trainer.train_step(model, examples)?;
        losses.push(loss);
        on_step(trainer.steps_done(), loss);
    }
    Ok(losses)
}

/// `"step,loss"` CSV with 1-based steps.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l:?}\n", i + 1));
    }
    s
}

/// `path` with `.suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes the weights and `<path>.policy.json`, the policy the streams were
/// trained under.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    model.params.save(path)?;
    fs::write(sidecar(path, "policy.json"), training_policy(&model.registry).to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Model::from_params(ModelConfig::default(), ParamStore::load(path)?)
}

/// Full recipe: dataset plus both phases. Deserializes from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub model_seed: u64,
    pub dataset: DatasetSpec,
    pub base: TrainConfig,
    pub streams: TrainConfig,
}

impl Recipe {
    /// Desk-scale recipe used by the acceptance run.
    pub fn toy() -> Self {
        Self {
            model_seed: 1,
            dataset: DatasetSpec::new(512, 2024),
            base: TrainConfig::toy_base(11),
            streams: TrainConfig::toy_streams(12),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let r: Recipe = toml::from_str(s).map_err(|e| CdstError::Config(e.message().to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CdstError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.base.validate()?;
        self.streams.validate()
    }
}

/// Loss curves of both phases.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub base_losses: Vec<f64>,
    pub stream_losses: Vec<f64>,
}

/// Initializes a model and runs both phases. `base` skips the base phase
/// by supplying already-trained base weights.
pub fn train(recipe: &Recipe, base: Option<&ParamStore>, on_step: &mut dyn FnMut(Phase, usize, f64)) -> Result<(Model, TrainReport)> {
    recipe.validate()?;
    let items = generate_dataset(&recipe.dataset)?;
    let examples: Vec<TrainExample> = items.iter().map(TrainExample::from_item).collect::<Result<_>>()?;
    let mut model = Model::init(ModelConfig::default(), recipe.model_seed)?;
    let mut report = TrainReport::default();
    match base {
        Some(b) => {
            for name in model.params.select(base_trainable) {
                *model.params.get_mut(&name)? = b.get(&name)?.clone();
            }
        }
        None => {
            report.base_losses = train_phase(&mut model, Phase::Base, &recipe.base, &examples, &mut |s, l| {
                on_step(Phase::Base, s, l)
            })?;
        }
    }
    report.stream_losses = train_phase(&mut model, Phase::Streams, &recipe.streams, &examples, &mut |s, l| {
        on_step(Phase::Streams, s, l)
    })?;
    Ok((model, report))
}
