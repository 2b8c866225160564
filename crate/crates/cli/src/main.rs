//! `amgc` — amodal content completion toolkit.
//!
//! Subcommands: `fixture` (demo corpus), `synth` (composite a training
//! split), `train`, `eval`, `complete` (single image), `audit`
//! (gradient/invariant self-checks).
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

mod kvconf;
mod panels;

use amgc::audit::{run_audit, AuditOptions};
use amgc::data::{
    load_split, parse_annotations, parse_recipe, synthesize_split, synthetic::generate_corpus,
    DatasetManifest, SynthSettings,
};
use amgc::mask::{CompositeSample, WeightedMask};
use amgc::metrics::{evaluate_pair, masked_metrics, MetricReport};
use amgc::network::generator_forward;
use amgc::tensor::{Shape, Tensor};
use amgc::train::{to_internal, to_unit, TrainConfig, Trainer};
use amgc::{Error, Result};
use clap::{Args, Parser, Subcommand};
use kvconf::KvConfig;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "amgc", version, about = "Amodal content completion with mask-guided gated convolutions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a small self-contained demo corpus (images + annotations).
    Fixture(FixtureArgs),
    /// Composite occluder-on-occludee training samples from a corpus.
    Synth(SynthArgs),
    /// Train the completion model on a synthesized split.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-sample metrics, aggregate, panels.
    Eval(EvalArgs),
    /// Complete a single occluded image with a trained checkpoint.
    Complete(CompleteArgs),
    /// Run the gradient and invariant self-audit.
    Audit(AuditArgs),
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of images (two instances each).
    #[arg(long, default_value_t = 6)]
    images: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// COCO-style annotation document.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory holding the referenced image files.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only instances whose category or supercategory matches.
    #[arg(long)]
    filter: Option<String>,
    /// Augmentation recipe, e.g. `hflip,rot90:2,shift:3:-2,crop:4`.
    #[arg(long, default_value = "none")]
    augment: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Square sample side in pixels (multiple of 8).
    #[arg(long)]
    size: Option<usize>,
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Synthesized split directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated loss terms to ablate:
    /// adversarial,perceptual,patch,style,reconstruction.
    #[arg(long)]
    ablate: Option<String>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `full` computes metrics on the whole composited image; `hole`
    /// additionally reports hole-restricted variants.
    #[arg(long, default_value = "full")]
    region: String,
    /// Also write per-sample comparison panels.
    #[arg(long, default_value_t = false)]
    panels: bool,
}

#[derive(Args)]
struct CompleteArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PNG); pixels under the mask hole are ignored.
    #[arg(long)]
    image: PathBuf,
    /// Weighted mask PNG (grayscale 0 / 128 / 255).
    #[arg(long)]
    mask: PathBuf,
    /// Output PNG for the composited completion.
    #[arg(long)]
    out: PathBuf,
    /// Optional comparison panel PNG.
    #[arg(long)]
    panel: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Negative control: route one check through a wrong backward pass;
    /// the audit must fail.
    #[arg(long, default_value_t = false)]
    inject_fault: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's helpful output, but with our usage exit code.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Cmd::Fixture(args) => cmd_fixture(args),
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Complete(args) => cmd_complete(args),
        Cmd::Audit(args) => cmd_audit(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_kv(path: &Option<PathBuf>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::load(p),
        None => Ok(KvConfig::empty()),
    }
}

fn cmd_fixture(args: FixtureArgs) -> Result<ExitCode> {
    let corpus = generate_corpus(&args.out, args.images, args.seed)?;
    println!(
        "fixture: {} instances across {} images at {}",
        corpus.instances,
        args.images,
        args.out.display()
    );
    println!("annotations: {}", corpus.annotations.display());
    println!("images: {}", corpus.images_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let kv = load_kv(&args.config)?;
    let mut settings = SynthSettings::default();
    kv.apply_synth(&mut settings)?;
    if let Some(size) = args.size {
        settings.size = size;
    }
    if settings.size < 8 || settings.size % 8 != 0 {
        return Err(Error::Config(format!(
            "sample size {} must be a multiple of 8",
            settings.size
        )));
    }
    let recipe = parse_recipe(&args.augment)?;
    let (records, stats) = parse_annotations(&args.annotations, &args.images)?;
    println!("parsed annotations: {stats}");
    let manifest = DatasetManifest::build("split", records, args.filter.as_deref(), args.seed, recipe);
    println!(
        "resolved synth: size={} ratio=({},{}) scale=({},{}) tries={} seed={} filter={} augment={}",
        settings.size,
        settings.ratio_bounds.0,
        settings.ratio_bounds.1,
        settings.scale_range.0,
        settings.scale_range.1,
        settings.max_tries,
        args.seed,
        args.filter.as_deref().unwrap_or("none"),
        args.augment,
    );
    if manifest.instances.is_empty() {
        return Err(Error::Annotations("no instances left after filtering".to_string()));
    }
    let summary = synthesize_split(&manifest, &settings, &args.out)?;
    println!("{summary}");
    if summary.samples_written == 0 {
        return Err(Error::Annotations("no samples could be synthesized".to_string()));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let samples_named = load_split(&args.data)?;
    let samples: Vec<CompositeSample> = samples_named.into_iter().map(|(_, s)| s).collect();

    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let mut t = Trainer::load_checkpoint(ckpt)?;
            if let Some(steps) = args.steps {
                t.cfg.steps = steps;
            }
            t
        }
        None => {
            let kv = load_kv(&args.config)?;
            let mut cfg = TrainConfig::default();
            kv.apply_train(&mut cfg)?;
            if kv.get("model.resolution").is_none() {
                cfg.model.resolution = infer_resolution_slice(&samples);
            }
            if let Some(steps) = args.steps {
                cfg.steps = steps;
            }
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(spec) = &args.ablate {
                for term in spec.split(',').filter(|s| !s.is_empty()) {
                    match term.trim() {
                        "adversarial" => cfg.ablate.adversarial = true,
                        "perceptual" => cfg.ablate.perceptual = true,
                        "patch" => cfg.ablate.patch = true,
                        "style" => cfg.ablate.style = true,
                        "reconstruction" => cfg.ablate.reconstruction = true,
                        other => {
                            return Err(Error::Config(format!("unknown loss term {other:?}")))
                        }
                    }
                }
            }
            Trainer::new(cfg)?
        }
    };

    let res = trainer.cfg.model.resolution;
    if samples.iter().any(|s| s.height() != res || s.width() != res) {
        return Err(Error::Config(format!(
            "model resolution {res} does not match split sample size {}",
            infer_resolution_slice(&samples)
        )));
    }

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    println!("resolved config:");
    for line in kvconf::resolved_lines(&trainer.cfg) {
        println!("  {line}");
    }
    println!("  {}", kvconf::effective_weight_line(&trainer.cfg.effective_weights()));
    println!("training on {} samples from {}", samples.len(), args.data.display());

    let log_path = args.out.join("loss_log.txt");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let steps = trainer.cfg.steps.saturating_sub(trainer.step);
    let log_every = trainer.cfg.log_every.max(1);
    let save_every = trainer.cfg.save_every;

    for _ in 0..steps {
        let batch = trainer.select_batch(&samples, trainer.step);
        let report = trainer.train_step(&batch)?;
        if report.step % log_every == 0 || report.step == 1 {
            writeln!(log, "{}", report.log_line()).map_err(|e| Error::io(&log_path, e))?;
        }
        if save_every > 0 && report.step % save_every == 0 {
            let path = args.out.join(format!("checkpoint_{:06}.ckpt", report.step));
            trainer.save_checkpoint(&path)?;
        }
    }
    let final_path = args.out.join("checkpoint_final.ckpt");
    trainer.save_checkpoint(&final_path)?;
    println!("trained to step {}; checkpoint: {}", trainer.step, final_path.display());
    println!("loss log: {}", log_path.display());
    Ok(ExitCode::SUCCESS)
}

fn infer_resolution_slice(samples: &[CompositeSample]) -> usize {
    samples.first().map(|s| s.height()).unwrap_or(0)
}

fn psnr_json(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!("inf")
    }
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    if args.region != "full" && args.region != "hole" {
        return Err(Error::Config(format!("--region must be full or hole, got {}", args.region)));
    }
    let trainer = Trainer::load_checkpoint(&args.checkpoint)?;
    let samples = load_split(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut out = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let mut per_sample = Vec::new();
    for (id, sample) in &samples {
        let output01 = complete_sample(&trainer, sample)?;
        let m = evaluate_pair(&sample.gt, &output01)?;
        per_sample.push(m);
        let mut record = serde_json::json!({
            "sample": id,
            "l1_error": m.l1_error,
            "l2_error": m.l2_error,
            "psnr_db": psnr_json(m.psnr_db),
            "ssim": m.ssim,
        });
        if args.region == "hole" {
            let (hl1, hl2, hpsnr, hssim) = masked_metrics(&sample.gt, &output01, &sample.occluded)?;
            record["hole_l1_error"] = serde_json::json!(hl1);
            record["hole_l2_error"] = serde_json::json!(hl2);
            record["hole_psnr_db"] = psnr_json(hpsnr);
            record["hole_ssim"] = match hssim {
                Some(v) => serde_json::json!(v),
                None => serde_json::Value::Null,
            };
        }
        writeln!(out, "{record}").map_err(|e| Error::io(&metrics_path, e))?;
        if args.panels {
            let panel = panels::sample_panel(&sample.gt, &sample.weighted, &sample.erased, &output01)?;
            let path = args.out.join(format!("{id}_panel.png"));
            panel.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        }
    }
    let report = MetricReport::from_samples(per_sample);
    let aggregate = serde_json::json!({
        "aggregate": true,
        "samples": report.per_sample.len(),
        "l1_error": report.mean.l1_error,
        "l2_error": report.mean.l2_error,
        "psnr_db": psnr_json(report.mean.psnr_db),
        "ssim": report.mean.ssim,
    });
    writeln!(out, "{aggregate}").map_err(|e| Error::io(&metrics_path, e))?;
    println!("{aggregate}");
    println!("metrics: {}", metrics_path.display());
    Ok(ExitCode::SUCCESS)
}

/// Run the generator on one sample; both input and output in [0, 1].
fn complete_sample(trainer: &Trainer, sample: &CompositeSample) -> Result<Tensor> {
    let erased = to_internal(&sample.erased)?;
    let weighted = sample.weighted.to_tensor();
    let out = generator_forward(&trainer.generator, &erased, &weighted)?;
    to_unit(&out.composited)
}

fn read_weighted_png(path: &Path) -> Result<WeightedMask> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (h, w) = (img.height() as usize, img.width() as usize);
    let mut values = vec![0.0; h * w];
    for (x, y, p) in img.enumerate_pixels() {
        values[y as usize * w + x as usize] = match p.0[0] {
            0 => 0.0,
            128 => 0.5,
            255 => 1.0,
            other => {
                return Err(Error::Image(format!(
                    "{}: weighted mask pixel {other} not in {{0,128,255}}",
                    path.display()
                )))
            }
        };
    }
    WeightedMask::from_values(h, w, values)
}

fn cmd_complete(args: CompleteArgs) -> Result<ExitCode> {
    let trainer = Trainer::load_checkpoint(&args.checkpoint)?;
    let rgb = image::open(&args.image)
        .map_err(|e| Error::Image(format!("{}: {e}", args.image.display())))?
        .to_rgb8();
    let weighted = read_weighted_png(&args.mask)?;
    let (h, w) = (rgb.height() as usize, rgb.width() as usize);
    if (weighted.height(), weighted.width()) != (h, w) {
        return Err(Error::Image(format!(
            "mask {}x{} does not match image {}x{}",
            weighted.height(),
            weighted.width(),
            h,
            w
        )));
    }
    let res = trainer.cfg.model.resolution;
    if h != res || w != res {
        return Err(Error::Config(format!(
            "checkpoint expects {res}x{res} inputs, got {h}x{w}"
        )));
    }
    let img01 = amgc::data::tensor_from_rgb(&rgb);
    // Erase the hole; the fill value carries no information.
    let mut erased = img01.to_vec();
    let shape = img01.shape();
    for c in 0..shape.c {
        for y in 0..h {
            for x in 0..w {
                if weighted.get(y, x) == 0.0 {
                    erased[shape.idx(0, c, y, x)] = 0.0;
                }
            }
        }
    }
    let erased01 = Tensor::constant(Shape::new(1, 3, h, w), erased)?;
    let out = generator_forward(&trainer.generator, &to_internal(&erased01)?, &weighted.to_tensor())?;
    let out01 = to_unit(&out.composited)?;
    let png = amgc::data::rgb_from_tensor(&out01)?;
    png.save(&args.out)
        .map_err(|e| Error::Image(format!("{}: {e}", args.out.display())))?;
    println!("completed image: {}", args.out.display());
    if let Some(panel_path) = &args.panel {
        let panel = panels::sample_panel(&img01, &weighted, &erased01, &out01)?;
        panel
            .save(panel_path)
            .map_err(|e| Error::Image(format!("{}: {e}", panel_path.display())))?;
        println!("panel: {}", panel_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(args: AuditArgs) -> Result<ExitCode> {
    let report = run_audit(&AuditOptions { inject_gradient_fault: args.inject_fault })?;
    for line in report.lines() {
        println!("{line}");
    }
    if report.passed() {
        println!("audit: all {} checks passed", report.checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("audit: FAILED");
        Ok(ExitCode::from(3))
    }
}

