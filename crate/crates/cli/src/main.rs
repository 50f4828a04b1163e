use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cdst_core::calibrate::global_color_calibration;
use cdst_core::colorlab::{build_palette, color_distance, extract_histogram, greyscale, DEFAULT_PALETTE};
use cdst_core::denoiser::{build_sdxl_layout, cdst_inference_policy, Stage};
use cdst_core::edges::{canny, DEFAULT_HIGH, DEFAULT_LOW, DEFAULT_SIGMA};
use cdst_core::io::{read_histogram, read_png, write_edge_png, write_histogram, write_png};
use cdst_core::params::ParamStore;
use cdst_core::sampler::UncondMode;
use cdst_core::training::{
    gen_synthetic, load_checkpoint, loss_csv, palette_colors, random_texture, save_checkpoint, sidecar, train, Phase, Recipe,
    SynthSpec, TextureFamily,
};
use cdst_core::workflows::{evaluate_pair, run_workflow, to_jsonl, MetricsRecord, RunLog, Workflow, WorkflowInputs, WorkflowPreset};
use clap::{Parser, Subcommand, ValueEnum};
use mimalloc::MiMalloc;
use rand::SeedableRng;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

/// Color-disentangled style transfer on a desk-scale diffusion model.
#[derive(Parser)]
#[command(name = "cdst", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WorkflowArg {
    Scp,
    Scc,
    Cp,
}

#[derive(Clone, Copy, ValueEnum)]
enum UncondArg {
    Text,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutPreset {
    Sdxl,
}

#[derive(Subcommand)]
enum Command {
    /// Quantized color histogram of an image as JSON.
    Histogram {
        image: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = DEFAULT_PALETTE)]
        palette: String,
    },
    /// Prints the color distance between two histogram files.
    Distance { a: PathBuf, b: PathBuf },
    /// Matches an image's YUV statistics to a reference.
    Calibrate {
        image: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        alpha: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Luma-only version of an image.
    Greyscale {
        image: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Binary edge map.
    Canny {
        image: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LOW)]
        low: f64,
        #[arg(long, default_value_t = DEFAULT_HIGH)]
        high: f64,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Prints the cross-attention block table with inference weights.
    Layout {
        #[arg(long, value_enum, default_value = "sdxl")]
        preset: LayoutPreset,
    },
    /// Trains a model from a recipe file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Reuse base weights from this checkpoint instead of training them.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Runs one workflow and writes the image plus a `.json` run log.
    Generate {
        #[arg(long, value_enum)]
        workflow: WorkflowArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        color: Option<PathBuf>,
        #[arg(long)]
        content: Option<PathBuf>,
        /// Caption key (0-15) or texture family name.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Named preset; defaults to the workflow's default preset.
        #[arg(long, conflicts_with = "preset_file")]
        preset: Option<String>,
        #[arg(long)]
        preset_file: Option<PathBuf>,
        #[arg(long)]
        style_weight: Option<f64>,
        #[arg(long)]
        color_weight: Option<f64>,
        #[arg(long)]
        controlnet_weight: Option<f64>,
        #[arg(long)]
        content_prior: Option<f64>,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        gcc_alpha: Option<f64>,
        #[arg(long, value_enum)]
        uncond: Option<UncondArg>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Scores every generated image in a directory; writes JSON lines.
    Eval {
        #[arg(long)]
        dir: PathBuf,
        /// Defaults to `<dir>/metrics.jsonl`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Writes a synthetic banded texture.
    Synth {
        #[arg(long)]
        family: String,
        /// Comma-separated palette indices, darkest band first.
        #[arg(long, value_delimiter = ',')]
        palette: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn family(name: &str) -> Result<TextureFamily> {
    TextureFamily::ALL
        .into_iter()
        .find(|f| format!("{f:?}").eq_ignore_ascii_case(name))
        .with_context(|| format!("unknown texture family {name:?}"))
}

fn prompt_key(p: &str) -> Result<usize> {
    match p.parse::<usize>() {
        Ok(k) => Ok(k),
        Err(_) => Ok(family(p)?.caption_key()),
    }
}

fn read_image(path: &Path) -> Result<cdst_core::colorlab::ImageBuffer> {
    read_png(path).with_context(|| format!("reading {}", path.display()))
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn layout_table() -> Result<String> {
    let reg = build_sdxl_layout();
    let policy = cdst_inference_policy(&reg)?;
    let mut s = String::from("block\tstage\tlambda_s\tlambda_c\tstyle\n");
    for i in 0..reg.total {
        let stage = match reg.stage(i) {
            Some(Stage::Encoder) => "encoder",
            Some(Stage::Middle) => "middle",
            Some(Stage::Decoder) => "decoder",
            None => "?",
        };
        let active = if policy.style_active[i] { "on" } else { "off" };
        s.push_str(&format!("{i}\t{stage}\t{:.1}\t{:.1}\t{active}\n", policy.lambda_s[i], policy.lambda_c[i]));
    }
    Ok(s)
}

#[allow(clippy::too_many_arguments)]
fn resolve_preset(
    wf: Workflow,
    preset: Option<String>,
    preset_file: Option<PathBuf>,
    style_weight: Option<f64>,
    color_weight: Option<f64>,
    controlnet_weight: Option<f64>,
    content_prior: Option<f64>,
    cfg: Option<f64>,
    steps: Option<usize>,
    gcc_alpha: Option<f64>,
    uncond: Option<UncondArg>,
) -> Result<WorkflowPreset> {
    let mut p = match preset_file {
        Some(f) => WorkflowPreset::from_toml(&fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?)?,
        None => WorkflowPreset::builtin(preset.as_deref().unwrap_or(wf.preset_name()))?,
    };
    if let Some(v) = style_weight {
        p.style_weight_pair.1 = v;
    }
    if let Some(v) = color_weight {
        p.color_weight = v;
    }
    if let Some(v) = controlnet_weight {
        p.controlnet_weight = v;
    }
    if let Some(v) = content_prior {
        p.content_prior_strength = v;
    }
    if let Some(v) = cfg {
        p.cfg_scale = v;
    }
    if let Some(v) = steps {
        p.steps = v;
    }
    if let Some(v) = gcc_alpha {
        p.gcc_alpha = v;
    }
    if let Some(u) = uncond {
        p.uncond = match u {
            UncondArg::Text => UncondMode::TextOnly,
            UncondArg::All => UncondMode::AllStreams,
        };
    }
    p.validate()?;
    Ok(p)
}

fn generate(log: &RunLog, output: &Path) -> Result<()> {
    let model = load_checkpoint(Path::new(&log.checkpoint)).with_context(|| format!("loading checkpoint {}", log.checkpoint))?;
    let style = read_image(Path::new(&log.style))?;
    let color = log.color.as_deref().map(|p| read_image(Path::new(p))).transpose()?;
    let content = log.content.as_deref().map(|p| read_image(Path::new(p))).transpose()?;
    let inputs = WorkflowInputs {
        style: &style,
        color: color.as_ref(),
        content: content.as_ref(),
        prompt: log.prompt,
    };
    let img = run_workflow(&model, log.workflow, &inputs, &log.preset, log.seed)?;
    write_png(output, &img)?;
    fs::write(sidecar(output, "json"), serde_json::to_string_pretty(log)? + "\n")?;
    Ok(())
}

fn eval_dir(dir: &Path, output: Option<PathBuf>) -> Result<()> {
    let mut logs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    logs.retain(|p| p.to_string_lossy().ends_with(".png.json"));
    logs.sort();
    if logs.is_empty() {
        bail!("no generated images (*.png with a .png.json run log) in {}", dir.display());
    }
    let mut records = Vec::with_capacity(logs.len());
    for log_path in logs {
        let log: RunLog = serde_json::from_str(&fs::read_to_string(&log_path)?)
            .with_context(|| format!("parsing {}", log_path.display()))?;
        let img_path = PathBuf::from(log_path.to_string_lossy().trim_end_matches(".json"));
        let out = read_image(&img_path)?;
        let color_ref = log
            .color_reference()
            .with_context(|| format!("{} names no color reference", log_path.display()))?;
        let metrics = evaluate_pair(&out, &read_image(Path::new(color_ref))?, &read_image(Path::new(log.luma_reference()))?)?;
        let id = img_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        records.push(MetricsRecord::new(id, metrics, &log.preset, log.seed));
    }
    let out = output.unwrap_or_else(|| dir.join("metrics.jsonl"));
    fs::write(&out, to_jsonl(&records)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Histogram { image, output, palette } => {
            let h = extract_histogram(&read_image(&image)?, &build_palette(&palette)?)?;
            write_histogram(&output, &h)?;
        }
        Command::Distance { a, b } => {
            let ha = read_histogram(&a).with_context(|| format!("reading {}", a.display()))?;
            let hb = read_histogram(&b).with_context(|| format!("reading {}", b.display()))?;
            println!("{}", color_distance(&ha, &hb)?);
        }
        Command::Calibrate {
            image,
            reference,
            alpha,
            output,
        } => {
            let out = global_color_calibration(&read_image(&image)?, &read_image(&reference)?, alpha)?;
            write_png(&output, &out)?;
        }
        Command::Greyscale { image, output } => write_png(&output, &greyscale(&read_image(&image)?)?)?,
        Command::Canny {
            image,
            low,
            high,
            sigma,
            output,
        } => write_edge_png(&output, &canny(&read_image(&image)?, low, high, sigma)?)?,
        Command::Layout { preset: LayoutPreset::Sdxl } => print!("{}", layout_table()?),
        Command::Train {
            config,
            output,
            base,
            quiet,
        } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let recipe = Recipe::from_toml(&text)?;
            let base = base
                .map(|b| ParamStore::load(&b).with_context(|| format!("loading base weights {}", b.display())))
                .transpose()?;
            let (model, report) = train(&recipe, base.as_ref(), &mut |phase, step, loss| {
                if !quiet && (step % 50 == 0 || step == 1) {
                    let name = if phase == Phase::Base { "base" } else { "streams" };
                    eprintln!("{name} step {step} loss {loss:.5}");
                }
            })?;
            save_checkpoint(&model, &output)?;
            fs::write(sidecar(&output, "loss.csv"), loss_csv(&report.stream_losses))?;
            if !report.base_losses.is_empty() {
                fs::write(sidecar(&output, "base-loss.csv"), loss_csv(&report.base_losses))?;
            }
        }
        Command::Generate {
            workflow,
            checkpoint,
            style,
            color,
            content,
            prompt,
            seed,
            preset,
            preset_file,
            style_weight,
            color_weight,
            controlnet_weight,
            content_prior,
            cfg,
            steps,
            gcc_alpha,
            uncond,
            output,
        } => {
            let wf = match workflow {
                WorkflowArg::Scp => Workflow::Scp,
                WorkflowArg::Scc => Workflow::Scc,
                WorkflowArg::Cp => Workflow::Cp,
            };
            let preset = resolve_preset(
                wf,
                preset,
                preset_file,
                style_weight,
                color_weight,
                controlnet_weight,
                content_prior,
                cfg,
                steps,
                gcc_alpha,
                uncond,
            )?;
            let log = RunLog {
                workflow: wf,
                checkpoint: path_str(&checkpoint),
                style: path_str(&style),
                color: color.as_deref().map(path_str),
                content: content.as_deref().map(path_str),
                prompt: prompt.as_deref().map(prompt_key).transpose()?,
                seed,
                preset,
            };
            generate(&log, &output)?;
        }
        Command::Eval { dir, output } => eval_dir(&dir, output)?,
        Command::Synth {
            family: name,
            palette,
            size,
            seed,
            output,
        } => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = SynthSpec {
                texture: random_texture(family(&name)?, &mut rng),
                palette: palette_colors(&palette)?,
                size,
            };
            write_png(&output, &gen_synthetic(&spec)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already embed their source text; skip repeats
            let mut msg = String::new();
            for cause in e.chain() {
                let s = cause.to_string();
                if !msg.contains(&s) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&s);
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
