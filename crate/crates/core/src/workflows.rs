//! Tuning-free inference workflows over a trained model, their presets and
//! evaluation records.

use serde::{Deserialize, Serialize};

use crate::calibrate::global_color_calibration;
use crate::codec::{decode, encode, LATENT_CHANNELS};
use crate::colorlab::{build_palette, color_distance, extract_histogram, greyscale, ColorHistogram, ImageBuffer, DEFAULT_PALETTE};
use crate::denoiser::{cdst_policy, InjectionPolicy, Model, STYLE_HIGH_WEIGHT, STYLE_LOW_WEIGHT};
use crate::edges::{canny, DEFAULT_HIGH, DEFAULT_LOW, DEFAULT_SIGMA};
use crate::embed::image_features;
use crate::error::{CdstError, Result};
use crate::sampler::{default_schedule, sample, ContentPrior, SampleRequest, UncondMode};
use crate::training::{dataset_item, gen_synthetic, palette_colors, random_palette_ids, DatasetSpec, SynthItem, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workflow {
    /// style + color + prompt
    Scp,
    /// style + color + content
    Scc,
    /// characteristics-preserved: style + content, content also sets color
    Cp,
}

impl Workflow {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scp" => Ok(Self::Scp),
            "scc" => Ok(Self::Scc),
            "cp" => Ok(Self::Cp),
            _ => Err(CdstError::InvalidParameter(format!("unknown workflow {s:?} (expected scp, scc or cp)"))),
        }
    }

    pub fn preset_name(self) -> &'static str {
        match self {
            Self::Scp => "default-scp",
            Self::Scc => "default-scc",
            Self::Cp => "default-cp",
        }
    }
}

fn default_uncond() -> UncondMode {
    UncondMode::TextOnly
}

/// Inference hyper-parameters. `style_weight_pair` is (encoder-range,
/// decoder-range) style weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowPreset {
    pub style_weight_pair: (f64, f64),
    pub color_weight: f64,
    pub controlnet_weight: f64,
    pub content_prior_strength: f64,
    pub cfg_scale: f64,
    pub steps: usize,
    pub gcc_alpha: f64,
    /// Streams the unconditional guidance branch removes.
    #[serde(default = "default_uncond", with = "uncond_serde")]
    pub uncond: UncondMode,
}

mod uncond_serde {
    use super::UncondMode;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &UncondMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match m {
            UncondMode::TextOnly => "text",
            UncondMode::AllStreams => "all",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<UncondMode, D::Error> {
        match String::deserialize(d)?.as_str() {
            "text" => Ok(UncondMode::TextOnly),
            "all" => Ok(UncondMode::AllStreams),
            other => Err(serde::de::Error::custom(format!("uncond must be \"text\" or \"all\", got {other:?}"))),
        }
    }
}

pub const PRESET_SCP: &str = include_str!("../../../presets/default-scp.toml");
pub const PRESET_SCC: &str = include_str!("../../../presets/default-scc.toml");
pub const PRESET_CP: &str = include_str!("../../../presets/default-cp.toml");

impl Default for WorkflowPreset {
    fn default() -> Self {
        Self {
            style_weight_pair: (STYLE_LOW_WEIGHT, STYLE_HIGH_WEIGHT),
            color_weight: 1.0,
            controlnet_weight: 1.0,
            content_prior_strength: 0.6,
            cfg_scale: 4.0,
            steps: 30,
            gcc_alpha: 0.8,
            uncond: UncondMode::TextOnly,
        }
    }
}

impl WorkflowPreset {
    pub fn from_toml(s: &str) -> Result<Self> {
        let p: Self = toml::from_str(s).map_err(|e| CdstError::Config(e.message().to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CdstError::Config(e.to_string()))
    }

    /// One of the shipped presets by name.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "default-scp" => PRESET_SCP,
            "default-scc" => PRESET_SCC,
            "default-cp" => PRESET_CP,
            _ => return Err(CdstError::Config(format!("unknown preset {name:?}"))),
        };
        Self::from_toml(text)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let (lo, hi) = self.style_weight_pair;
        let weights_ok = [lo, hi, self.color_weight, self.controlnet_weight]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if !weights_ok {
            return Err(CdstError::InvalidParameter("stream weights must be finite and non-negative".into()));
        }
        if !unit(self.content_prior_strength) || !unit(self.gcc_alpha) {
            return Err(CdstError::InvalidParameter("content_prior_strength and gcc_alpha must lie in [0, 1]".into()));
        }
        if !self.cfg_scale.is_finite() || self.steps == 0 {
            return Err(CdstError::InvalidParameter("cfg_scale must be finite and steps positive".into()));
        }
        Ok(())
    }

    /// Injection policy: style on the two fixed block ranges, color
    /// everywhere.
    pub fn policy(&self, model: &Model) -> Result<InjectionPolicy> {
        cdst_policy(&model.registry, self.style_weight_pair.0, self.style_weight_pair.1, self.color_weight)
    }

    /// Preset with the decoder-range style weight replaced.
    pub fn with_style_weight(mut self, w: f64) -> Self {
        self.style_weight_pair.1 = w;
        self
    }
}

fn histogram(img: &ImageBuffer) -> Result<ColorHistogram> {
    extract_histogram(img, &build_palette(DEFAULT_PALETTE)?)
}

fn latent_shape(img: &ImageBuffer) -> Result<[usize; 3]> {
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
        return Err(CdstError::InvalidImage(format!("image sides must be multiples of 8, got {w}x{h}")));
    }
    Ok([h / 2, w / 2, LATENT_CHANNELS])
}

struct Conditioning {
    req: SampleRequest,
}

fn conditioning(
    model: &Model,
    style_img: &ImageBuffer,
    color_img: &ImageBuffer,
    prompt_key: Option<usize>,
    preset: &WorkflowPreset,
    seed: u64,
    shape: [usize; 3],
) -> Result<Conditioning> {
    preset.validate()?;
    let null = model.caption(model.config.null_caption())?;
    let e_t = match prompt_key {
        Some(k) => model.caption(k)?,
        None => null.clone(),
    };
    let req = SampleRequest {
        e_t,
        e_t_null: null,
        e_s: Some(model.style_tokens(&image_features(style_img)?)?),
        e_c: Some(model.color_tokens(&histogram(color_img)?)?),
        policy: preset.policy(model)?,
        steps: preset.steps,
        cfg_scale: preset.cfg_scale,
        seed,
        content_prior: None,
        cond: None,
        uncond: preset.uncond,
        latent_shape: shape,
    };
    Ok(Conditioning { req })
}

fn finish(model: &Model, req: &SampleRequest, color_ref: &ImageBuffer, alpha: f64) -> Result<ImageBuffer> {
    let out = sample(req, model, &default_schedule())?;
    let img = decode(&out.latent)?;
    if out.trace.is_empty() {
        // no denoising happened, so the image already is the reference
        return Ok(img);
    }
    global_color_calibration(&img, color_ref, alpha)
}

/// Style from the greyscale of `style_img`, color distribution from
/// `color_img`, caption `prompt_key`; calibrated against `color_img`.
pub fn style_color_prompt(
    model: &Model,
    style_img: &ImageBuffer,
    color_img: &ImageBuffer,
    prompt_key: usize,
    preset: &WorkflowPreset,
    seed: u64,
) -> Result<ImageBuffer> {
    let shape = latent_shape(style_img)?;
    let c = conditioning(model, style_img, color_img, Some(prompt_key), preset, seed, shape)?;
    finish(model, &c.req, color_img, preset.gcc_alpha)
}

/// As [`style_color_prompt`] plus edge conditioning from `content_img`.
/// Without a prompt the caption is the null entry.
pub fn style_color_content(
    model: &Model,
    style_img: &ImageBuffer,
    color_img: &ImageBuffer,
    content_img: &ImageBuffer,
    prompt_key: Option<usize>,
    preset: &WorkflowPreset,
    seed: u64,
) -> Result<ImageBuffer> {
    let shape = latent_shape(content_img)?;
    let mut c = conditioning(model, style_img, color_img, prompt_key, preset, seed, shape)?;
    let edges = canny(content_img, DEFAULT_LOW, DEFAULT_HIGH, DEFAULT_SIGMA)?;
    c.req.cond = Some(model.condition_residuals(&edges, preset.controlnet_weight)?);
    finish(model, &c.req, color_img, preset.gcc_alpha)
}

/// Restyles `content_img` while keeping its pixel-aligned colors: the
/// content image is also the color reference, the sampler starts from its
/// noised latent, and its edges condition the UNet.
pub fn characteristics_preserved(
    model: &Model,
    style_img: &ImageBuffer,
    content_img: &ImageBuffer,
    prompt_key: Option<usize>,
    preset: &WorkflowPreset,
    seed: u64,
) -> Result<ImageBuffer> {
    let shape = latent_shape(content_img)?;
    let mut c = conditioning(model, style_img, content_img, prompt_key, preset, seed, shape)?;
    let edges = canny(content_img, DEFAULT_LOW, DEFAULT_HIGH, DEFAULT_SIGMA)?;
    c.req.cond = Some(model.condition_residuals(&edges, preset.controlnet_weight)?);
    c.req.content_prior = Some(ContentPrior {
        latent: encode(content_img)?,
        strength: preset.content_prior_strength,
    });
    finish(model, &c.req, content_img, preset.gcc_alpha)
}

/// Inputs of one workflow run.
#[derive(Clone, Debug)]
pub struct WorkflowInputs<'a> {
    pub style: &'a ImageBuffer,
    pub color: Option<&'a ImageBuffer>,
    pub content: Option<&'a ImageBuffer>,
    pub prompt: Option<usize>,
}

/// Dispatches to the workflow, checking that its inputs are present.
pub fn run_workflow(model: &Model, wf: Workflow, inputs: &WorkflowInputs, preset: &WorkflowPreset, seed: u64) -> Result<ImageBuffer> {
    let need = |o: Option<&ImageBuffer>, what: &str| -> Result<ImageBuffer> {
        o.cloned()
            .ok_or_else(|| CdstError::InvalidParameter(format!("workflow {wf:?} needs a {what} image")))
    };
    match wf {
        Workflow::Scp => {
            let color = need(inputs.color, "color")?;
            let prompt = inputs
                .prompt
                .ok_or_else(|| CdstError::InvalidParameter("workflow Scp needs a prompt key".into()))?;
            style_color_prompt(model, inputs.style, &color, prompt, preset, seed)
        }
        Workflow::Scc => {
            let (color, content) = (need(inputs.color, "color")?, need(inputs.content, "content")?);
            style_color_content(model, inputs.style, &color, &content, inputs.prompt, preset, seed)
        }
        Workflow::Cp => {
            let content = need(inputs.content, "content")?;
            characteristics_preserved(model, inputs.style, &content, inputs.prompt, preset, seed)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub color_distance: f64,
    pub luma_mse: f64,
}

/// Color distance of `out` to `color_ref` and greyscale MSE of `out`
/// against `luma_ref`.
pub fn evaluate_pair(out: &ImageBuffer, color_ref: &ImageBuffer, luma_ref: &ImageBuffer) -> Result<PairMetrics> {
    let color_distance = color_distance(&histogram(out)?, &histogram(color_ref)?)?;
    if (out.width(), out.height()) != (luma_ref.width(), luma_ref.height()) {
        return Err(CdstError::InvalidImage(format!(
            "luma reference is {}x{}, output {}x{}",
            luma_ref.width(),
            luma_ref.height(),
            out.width(),
            out.height()
        )));
    }
    let (a, b) = (greyscale(out)?, greyscale(luma_ref)?);
    let luma_mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    Ok(PairMetrics {
        color_distance,
        luma_mse,
    })
}

/// One line of a metrics JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub id: String,
    pub color_distance: f64,
    pub luma_mse: f64,
    pub preset: WorkflowPreset,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn new(id: impl Into<String>, m: PairMetrics, preset: &WorkflowPreset, seed: u64) -> Self {
        Self {
            id: id.into(),
            color_distance: m.color_distance,
            luma_mse: m.luma_mse,
            preset: preset.clone(),
            seed,
        }
    }
}

pub fn to_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Everything needed to rerun a `generate` invocation bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub workflow: Workflow,
    pub checkpoint: String,
    pub style: String,
    pub color: Option<String>,
    pub content: Option<String>,
    pub prompt: Option<usize>,
    pub seed: u64,
    pub preset: WorkflowPreset,
}

impl RunLog {
    /// The image the output's colors should follow.
    pub fn color_reference(&self) -> Option<&str> {
        match self.workflow {
            Workflow::Cp => self.content.as_deref(),
            _ => self.color.as_deref(),
        }
    }

    /// The image the output's greyscale is compared with.
    pub fn luma_reference(&self) -> &str {
        self.content.as_deref().unwrap_or(&self.style)
    }
}

/// A held-out style/color crossing: two textures with disjoint palettes of
/// equal size.
#[derive(Clone, Debug)]
pub struct Crossing {
    pub style: SynthItem,
    pub color: SynthItem,
}

/// `n` crossings drawn from `ds`. Item `2i` gives the style texture; item
/// `2i + 1` gives the color image, recolored with a palette disjoint from
/// the style palette and of the same size.
pub fn synthetic_crossings(ds: &DatasetSpec, n: usize) -> Result<Vec<Crossing>> {
    use rand::SeedableRng;
    ds.validate()?;
    (0..n)
        .map(|i| {
            let style = dataset_item(ds, 2 * i)?;
            let base = dataset_item(ds, 2 * i + 1)?;
            let k = style.palette_ids.len();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ds.seed ^ 0x5eed);
            rng.set_stream(i as u64);
            let ids = random_palette_ids(&ds.palette_pool, k, &style.palette_ids, &mut rng)?;
            let spec = SynthSpec {
                texture: base.spec.texture.clone(),
                palette: palette_colors(&ids)?,
                size: ds.size,
            };
            let image = gen_synthetic(&spec)?;
            let color = SynthItem {
                spec,
                palette_ids: ids,
                image,
            };
            Ok(Crossing { style, color })
        })
        .collect()
}
