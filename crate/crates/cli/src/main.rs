//! Command-line front end: train, score, evaluate, and dump-features.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use msfpt_core::backbone::{build_pyramid, extract_features};
use msfpt_core::data::{decode_image, evaluate, save_fvol, Manifest};
use msfpt_core::model::{patch_grid, MsfptModel};
use msfpt_core::nn::load_checkpoint;
use msfpt_core::train::{train, TrainConfig, TrainPair};
use msfpt_core::{ModelConfig, Scale};

#[derive(Parser)]
#[command(name = "msfpt", version, about = "Multi-scale full-reference image quality scoring")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a manifest and write the checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON config file with "model" and "train" sections.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score one reference/distorted pair and print JSON.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "dist")]
        distorted: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated subset of the checkpoint's scales, e.g. "1,2".
        #[arg(long)]
        scales: Option<String>,
        /// Number of deterministic test-time patches to average.
        #[arg(long, default_value_t = 1)]
        patches: usize,
    },
    /// Score a whole manifest and write an evaluation report.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 1)]
        patches: usize,
    },
    /// Extract backbone features for one image at one scale.
    DumpFeatures {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        scale: Scale,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
struct TrainFileConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct PerScaleScore {
    scale: String,
    score_normalized: f64,
    score: f64,
}

#[derive(Serialize)]
struct ScoreOutput {
    reference: String,
    distorted: String,
    checkpoint: String,
    scales: Vec<String>,
    patches: usize,
    score_normalized: f64,
    score: f64,
    per_scale: Vec<PerScaleScore>,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Command::Train {
            manifest,
            config,
            out,
            seed,
        } => cmd_train(&manifest, &config, &out, seed),
        Command::Score {
            reference,
            distorted,
            ckpt,
            scales,
            patches,
        } => cmd_score(&reference, &distorted, &ckpt, scales.as_deref(), patches),
        Command::Evaluate {
            manifest,
            ckpt,
            report,
            patches,
        } => cmd_evaluate(&manifest, &ckpt, &report, patches),
        Command::DumpFeatures {
            image,
            scale,
            ckpt,
            out,
        } => cmd_dump_features(&image, scale, &ckpt, &out),
    }
}

fn cmd_train(manifest: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg_text = std::fs::read_to_string(config)
        .with_context(|| format!("cannot read config '{}'", config.display()))?;
    let mut file_cfg: TrainFileConfig =
        serde_json::from_str(&cfg_text).with_context(|| "invalid config JSON")?;
    if let Some(s) = seed {
        file_cfg.train.seed = s;
    }
    let manifest = Manifest::load(manifest)?;
    let mut pairs = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        pairs.push(TrainPair {
            reference: decode_image(&entry.ref_path)?,
            distorted: decode_image(&entry.dist_path)?,
            mos: entry.mos,
        });
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let result = train(file_cfg.model, file_cfg.train, pairs, out, &mut lock)?;
    eprintln!(
        "trained {} steps, checkpoint written to '{}'",
        result.history.len(),
        result.checkpoint_path.display()
    );
    Ok(())
}

fn parse_scale_subset(arg: &str, available: &[Scale]) -> Result<Vec<Scale>> {
    let mut out = Vec::new();
    for part in arg.split(',') {
        let s: Scale = part.parse().map_err(|e: String| anyhow::anyhow!(e))?;
        if !available.contains(&s) {
            bail!("scale {s} is not present in the checkpoint");
        }
        if out.contains(&s) {
            bail!("duplicate scale {s}");
        }
        out.push(s);
    }
    if out.is_empty() {
        bail!("at least one scale required");
    }
    Ok(out)
}

fn cmd_score(
    reference: &Path,
    distorted: &Path,
    ckpt: &Path,
    scales: Option<&str>,
    patches: usize,
) -> Result<()> {
    if patches == 0 {
        bail!("--patches must be >= 1");
    }
    let (store, meta, _) = load_checkpoint(ckpt)?;
    let mut cfg = meta.model.clone();
    if let Some(arg) = scales {
        cfg.scales = parse_scale_subset(arg, &meta.model.scales)?;
    }
    let model = MsfptModel::new(cfg.clone(), &store)
        .map_err(|e| anyhow::anyhow!("checkpoint incompatible with config: {e}"))?;

    let ref_img = decode_image(reference)?;
    let dist_img = decode_image(distorted)?;
    if ref_img.height() != dist_img.height() || ref_img.width() != dist_img.width() {
        bail!(
            "pair sizes differ: {}x{} vs {}x{}",
            ref_img.height(),
            ref_img.width(),
            dist_img.height(),
            dist_img.width()
        );
    }
    let patch = meta.patch_size.min(ref_img.height()).min(ref_img.width());

    let mut final_sum = 0.0;
    let mut scale_sums = vec![0.0; cfg.scales.len()];
    for (y0, x0) in patch_grid(ref_img.height(), ref_img.width(), patch, patches) {
        let rp = ref_img.crop(y0, x0, patch, patch)?;
        let dp = dist_img.crop(y0, x0, patch, patch)?;
        let (final_score, per_scale) = model.score_pair(&rp, &dp)?;
        final_sum += f64::from(final_score.item());
        for (i, (_, t)) in per_scale.iter().enumerate() {
            scale_sums[i] += f64::from(t.item());
        }
    }
    let m = patches as f64;
    let normalized = final_sum / m;
    let output = ScoreOutput {
        reference: reference.display().to_string(),
        distorted: distorted.display().to_string(),
        checkpoint: ckpt.display().to_string(),
        scales: cfg.scales.iter().map(Scale::to_string).collect(),
        patches,
        score_normalized: normalized,
        score: meta.denormalize(normalized),
        per_scale: cfg
            .scales
            .iter()
            .zip(&scale_sums)
            .map(|(s, &sum)| PerScaleScore {
                scale: s.to_string(),
                score_normalized: sum / m,
                score: meta.denormalize(sum / m),
            })
            .collect(),
    };
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

fn cmd_evaluate(manifest: &Path, ckpt: &Path, report: &Path, patches: usize) -> Result<()> {
    if patches == 0 {
        bail!("--patches must be >= 1");
    }
    let manifest = Manifest::load(manifest)?;
    let result = evaluate(ckpt, &manifest, patches)?;
    std::fs::write(report, serde_json::to_string_pretty(&result)?)
        .with_context(|| format!("cannot write report '{}'", report.display()))?;
    eprintln!(
        "evaluated {} pairs in {:.2}s: plcc={:.4} srcc={:.4} krcc={:.4} main={:.4}",
        result.num_pairs,
        result.elapsed_seconds,
        result.aggregates.plcc,
        result.aggregates.srcc,
        result.aggregates.krcc,
        result.aggregates.main_score
    );
    Ok(())
}

fn cmd_dump_features(image: &Path, scale: Scale, ckpt: &Path, out: &Path) -> Result<()> {
    let (store, meta, _) = load_checkpoint(ckpt)?;
    let img = decode_image(image)?;
    let level = build_pyramid(&img, &[scale])?.remove(0);
    let features = extract_features(&level, &store, &meta.model, scale)?;
    save_fvol(&features, out)?;
    let (h, w) = features.spatial();
    eprintln!(
        "wrote {}x{h}x{w} feature volume at scale {scale} to '{}'",
        features.channels(),
        out.display()
    );
    Ok(())
}
