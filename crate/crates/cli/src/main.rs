//! `lesion`: command-line front end for the two-stage pipeline.
//!
//! Subcommands: train-seg, train-cls, extract-roi, eval, predict,
//! overlay, synth. Configs are JSON with unknown keys rejected; the
//! `LESION_SEED` environment variable overrides any configured seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lesion_core::augment::AugmentConfig;
use lesion_core::cascade::{batch_extract_roi, roi_for_classifier, RoiConfig};
use lesion_core::checkpoint::{config_digest, Checkpoint, CheckpointKind};
use lesion_core::clsmodel::{ClsModel, ClsModelConfig};
use lesion_core::dataio::{
    load_cls_manifest, load_image, load_mask, load_seg_manifest, split, DatasetManifest,
    NormalizationPolicy, SplitTag,
};
use lesion_core::metrics::{classification_report, dice_score, iou, MetricsReport};
use lesion_core::segmodel::{SegModel, SegModelConfig};
use lesion_core::synthgen::{generate_cls_dataset, generate_seg_dataset, SynthConfig};
use lesion_core::trainer::{train_classification, train_segmentation, write_epoch_log, TrainConfig};
use lesion_core::viz::save_overlay;

#[derive(Parser)]
#[command(name = "lesion", about = "Two-stage skin lesion segmentation and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the segmentation model from a JSON run config.
    TrainSeg {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the classification model from a JSON run config.
    TrainCls {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Extract ROI images for a classification dataset using a trained
    /// segmenter; writes images/ + labels.csv under out-dir.
    ExtractRoi {
        #[arg(long)]
        seg_checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Labels CSV; defaults to data-dir/labels.csv.
        #[arg(long)]
        labels_csv: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Crop to the mask bounding box instead of full-frame masking.
        #[arg(long)]
        crop_to_bbox: bool,
    },
    /// Evaluate a checkpoint on a dataset directory and emit a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        labels_csv: Option<PathBuf>,
        /// Classify masked ROI images produced by this segmenter.
        #[arg(long, conflicts_with = "without_roi")]
        with_roi: Option<PathBuf>,
        /// Classify the raw images (default).
        #[arg(long)]
        without_roi: bool,
        /// Normalization policy the data was prepared with, as JSON;
        /// refused when it differs from the checkpoint's.
        #[arg(long)]
        normalization: Option<String>,
        /// Report output path (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one image through a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output path: predicted mask PNG (segmentation) or result JSON
        /// (classification). Classification prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render prediction (green) and ground-truth (blue) mask boundaries
    /// over an image.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        gt_mask: PathBuf,
        #[arg(long)]
        pred_mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset from a JSON config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Dataset flavor: "seg" or "cls".
        #[arg(long, default_value = "seg")]
        kind: String,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathsConfig {
    data_dir: PathBuf,
    out_dir: PathBuf,
    #[serde(default)]
    labels_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegRunConfig {
    normalization: NormalizationPolicy,
    #[serde(default)]
    augment: Option<AugmentConfig>,
    model: SegModelConfig,
    train: TrainConfig,
    paths: PathsConfig,
    #[serde(default)]
    train_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClsRunConfig {
    normalization: NormalizationPolicy,
    #[serde(default)]
    augment: Option<AugmentConfig>,
    model: ClsModelConfig,
    train: TrainConfig,
    paths: PathsConfig,
    #[serde(default)]
    train_fraction: Option<f64>,
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// LESION_SEED beats --seed beats the config file.
fn resolve_seed(config_seed: u64, flag: Option<u64>) -> Result<u64> {
    if let Ok(env) = std::env::var("LESION_SEED") {
        return env
            .parse()
            .with_context(|| format!("LESION_SEED is not a valid seed: '{env}'"));
    }
    Ok(flag.unwrap_or(config_seed))
}

fn split_manifests(
    manifest: &DatasetManifest,
    train_fraction: Option<f64>,
    seed: u64,
) -> Result<(DatasetManifest, Option<DatasetManifest>)> {
    let fraction = train_fraction.unwrap_or(0.8);
    let tagged = split(manifest, fraction, seed)?;
    let train = tagged.filter_split(SplitTag::Train);
    let val = tagged.filter_split(SplitTag::Test);
    Ok((train, (!val.is_empty()).then_some(val)))
}

fn cmd_train_seg(config_path: &Path, seed: Option<u64>, epochs: Option<usize>) -> Result<()> {
    let mut config: SegRunConfig = read_config(config_path)?;
    config.train.seed = resolve_seed(config.train.seed, seed)?;
    if let Some(epochs) = epochs {
        config.train.max_epochs = epochs;
    }
    fs::create_dir_all(&config.paths.out_dir)?;

    let manifest = load_seg_manifest(&config.paths.data_dir)?;
    let (train, val) = split_manifests(&manifest, config.train_fraction, config.train.seed)?;
    let mut model = SegModel::build(config.model.clone(), config.train.seed)?;
    let records = train_segmentation(
        &mut model,
        &train,
        val.as_ref(),
        &config.normalization,
        config.augment.as_ref(),
        &config.train,
    )?;

    let ckpt = Checkpoint::from_seg(&model, config.normalization, config.train.seed)?;
    let ckpt_path = config.paths.out_dir.join("checkpoint_seg.json");
    ckpt.save(&ckpt_path)?;
    write_epoch_log(&config.paths.out_dir.join("epochs_seg.jsonl"), &records)?;
    if let Some(last) = records.last() {
        println!(
            "trained {} epochs, final loss {:.6}",
            records.len(),
            last.loss_total
        );
    }
    println!("checkpoint {} (digest {})", ckpt_path.display(), ckpt.config_digest);
    Ok(())
}

fn cmd_train_cls(config_path: &Path, seed: Option<u64>, epochs: Option<usize>) -> Result<()> {
    let mut config: ClsRunConfig = read_config(config_path)?;
    config.train.seed = resolve_seed(config.train.seed, seed)?;
    if let Some(epochs) = epochs {
        config.train.max_epochs = epochs;
    }
    fs::create_dir_all(&config.paths.out_dir)?;

    let labels = config
        .paths
        .labels_csv
        .clone()
        .unwrap_or_else(|| config.paths.data_dir.join("labels.csv"));
    let manifest = load_cls_manifest(&config.paths.data_dir, &labels)?;
    let (train, val) = split_manifests(&manifest, config.train_fraction, config.train.seed)?;
    let mut model = ClsModel::build(config.model.clone(), config.train.seed)?;
    let records = train_classification(
        &mut model,
        &train,
        val.as_ref(),
        &config.normalization,
        config.augment.as_ref(),
        &config.train,
    )?;

    let ckpt = Checkpoint::from_cls(&model, config.normalization, config.train.seed)?;
    let ckpt_path = config.paths.out_dir.join("checkpoint_cls.json");
    ckpt.save(&ckpt_path)?;
    write_epoch_log(&config.paths.out_dir.join("epochs_cls.jsonl"), &records)?;
    if let Some(last) = records.last() {
        println!(
            "trained {} epochs, final loss {:.6}",
            records.len(),
            last.loss_total
        );
    }
    println!("checkpoint {} (digest {})", ckpt_path.display(), ckpt.config_digest);
    Ok(())
}

fn cmd_extract_roi(
    seg_checkpoint: &Path,
    data_dir: &Path,
    labels_csv: Option<&Path>,
    out_dir: &Path,
    crop_to_bbox: bool,
) -> Result<()> {
    let ckpt = Checkpoint::load(seg_checkpoint)?;
    let model = ckpt.to_seg_model()?;
    let labels = labels_csv
        .map(Path::to_path_buf)
        .unwrap_or_else(|| data_dir.join("labels.csv"));
    let manifest = load_cls_manifest(data_dir, &labels)?;
    let roi_config = RoiConfig { crop_to_bbox };
    let out_manifest = batch_extract_roi(&model, &manifest, &ckpt.normalization, &roi_config, out_dir)?;
    let meta = serde_json::json!({
        "config_digest": ckpt.config_digest,
        "n_samples": out_manifest.len(),
        "class_counts": out_manifest.class_counts,
    });
    fs::write(out_dir.join("roi_meta.json"), serde_json::to_string_pretty(&meta)?)?;
    println!("wrote {} ROI images to {}", out_manifest.len(), out_dir.display());
    Ok(())
}

fn check_requested_policy(ckpt: &Checkpoint, requested: Option<&str>) -> Result<()> {
    if let Some(text) = requested {
        let policy: NormalizationPolicy =
            serde_json::from_str(text).context("parsing --normalization")?;
        ckpt.check_policy(&policy)?;
    }
    Ok(())
}

fn print_and_write_report(report: &MetricsReport, out: Option<&Path>) -> Result<()> {
    if let Some(dice) = report.dice {
        println!("Model evaluation ({} samples)", report.n_samples);
        println!("{:<12} {:>8} {:>8}", "digest", "Dice", "mIoU");
        println!(
            "{:<12} {:>8} {:>8}",
            &report.config_digest[..report.config_digest.len().min(12)],
            MetricsReport::percent(dice),
            MetricsReport::percent(report.miou.unwrap_or(0.0)),
        );
    }
    if let Some(acc) = report.accuracy {
        println!("Model evaluation ({} samples)", report.n_samples);
        println!("accuracy {}", MetricsReport::percent(acc));
        if let Some(confusion) = &report.confusion {
            println!("confusion (rows = truth):");
            for row in confusion {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
                println!("  {}", cells.join(" "));
            }
        }
    }
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(report)?)?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn eval_seg(ckpt: &Checkpoint, data_dir: &Path, out: Option<&Path>) -> Result<()> {
    let model = ckpt.to_seg_model()?;
    let manifest = load_seg_manifest(data_dir)?;
    let samples = manifest.seg_samples()?;
    let mut pairs = Vec::new();
    for s in samples {
        let image = load_image(&s.image_path, &ckpt.normalization)?;
        let gt = load_mask(&s.mask_path, &ckpt.normalization)?;
        let pred = model.predict_mask(&image, 0.5)?;
        pairs.push((pred, gt));
    }
    let mut dice_sum = 0.0;
    let mut iou_sum = 0.0;
    for (p, g) in &pairs {
        dice_sum += dice_score(p, g)?;
        iou_sum += iou(p, g)?;
    }
    let n = pairs.len();
    let report = MetricsReport {
        dice: Some(dice_sum / n as f64),
        miou: Some(iou_sum / n as f64),
        accuracy: None,
        confusion: None,
        n_samples: n,
        config_digest: ckpt.config_digest.clone(),
    };
    print_and_write_report(&report, out)
}

fn eval_cls(
    ckpt: &Checkpoint,
    data_dir: &Path,
    labels_csv: Option<&Path>,
    seg_checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let model = ckpt.to_cls_model()?;
    let labels_path = labels_csv
        .map(Path::to_path_buf)
        .unwrap_or_else(|| data_dir.join("labels.csv"));
    let manifest = load_cls_manifest(data_dir, &labels_path)?;
    let samples = manifest.cls_samples()?;
    let (th, tw, _) = model.config.input_size;

    let seg = match seg_checkpoint {
        Some(path) => {
            let seg_ckpt = Checkpoint::load(path)?;
            Some((seg_ckpt.to_seg_model()?, seg_ckpt.normalization))
        }
        None => None,
    };

    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for s in samples {
        let input = match &seg {
            Some((seg_model, seg_policy)) => {
                let image = load_image(&s.image_path, seg_policy)?;
                let mask = seg_model.predict_mask(&image, 0.5)?;
                let roi = lesion_core::cascade::extract_roi(&image, &mask)?;
                roi_for_classifier(&roi, &mask, &RoiConfig::default(), (th, tw))?
            }
            None => load_image(&s.image_path, &ckpt.normalization)?,
        };
        preds.push(model.predict_classes(&input)?[0]);
        truths.push(s.label);
    }
    let report = classification_report(&preds, &truths, &ckpt.config_digest)?;
    print_and_write_report(&report, out)
}

fn cmd_predict(checkpoint: &Path, image_path: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    match ckpt.kind {
        CheckpointKind::Segmentation => {
            let model = ckpt.to_seg_model()?;
            let image = load_image(image_path, &ckpt.normalization)?;
            let mask = model.predict_mask(&image, 0.5)?;
            let out = out.context("--out is required for segmentation predictions")?;
            lesion_core::dataio::save_mask(out, &mask, 0)?;
            println!("mask written to {}", out.display());
        }
        CheckpointKind::Classification => {
            let model = ckpt.to_cls_model()?;
            let image = load_image(image_path, &ckpt.normalization)?;
            let probs = model.predict_probs(&image)?;
            let label = model.predict_classes(&image)?[0];
            let k = probs.dim().3;
            let result = serde_json::json!({
                "label": label.to_string(),
                "probs": (0..k).map(|c| probs[(0, 0, 0, c)]).collect::<Vec<f64>>(),
                "config_digest": ckpt.config_digest,
            });
            let text = serde_json::to_string_pretty(&result)?;
            match out {
                Some(path) => {
                    fs::write(path, &text)?;
                    println!("result written to {}", path.display());
                }
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn cmd_overlay(image: &Path, gt: &Path, pred: &Path, out: &Path) -> Result<()> {
    let (w, h) = image::image_dimensions(image)
        .with_context(|| format!("reading {}", image.display()))?;
    let policy = NormalizationPolicy::unit(h as usize, w as usize);
    let image_t = load_image(image, &policy)?;
    let gt_t = load_mask(gt, &policy)?;
    let pred_t = load_mask(pred, &policy)?;
    save_overlay(out, &image_t, &gt_t, &pred_t)?;
    println!("overlay written to {}", out.display());
    Ok(())
}

fn cmd_synth(config_path: &Path, out_dir: &Path, kind: &str, seed: Option<u64>) -> Result<()> {
    let mut config: SynthConfig = read_config(config_path)?;
    config.seed = resolve_seed(config.seed, seed)?;
    fs::create_dir_all(out_dir)?;
    let manifest = match kind {
        "seg" => generate_seg_dataset(&config, out_dir)?,
        "cls" => generate_cls_dataset(&config, out_dir)?,
        other => bail!("unknown dataset kind '{other}', expected 'seg' or 'cls'"),
    };
    println!(
        "generated {} samples in {} (digest {})",
        manifest.len(),
        out_dir.display(),
        config_digest(&config)
    );
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::TrainSeg { config, seed, epochs } => cmd_train_seg(config, *seed, *epochs),
        Command::TrainCls { config, seed, epochs } => cmd_train_cls(config, *seed, *epochs),
        Command::ExtractRoi {
            seg_checkpoint,
            data_dir,
            labels_csv,
            out_dir,
            crop_to_bbox,
        } => cmd_extract_roi(
            seg_checkpoint,
            data_dir,
            labels_csv.as_deref(),
            out_dir,
            *crop_to_bbox,
        ),
        Command::Eval {
            checkpoint,
            data_dir,
            labels_csv,
            with_roi,
            without_roi: _,
            normalization,
            out,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            check_requested_policy(&ckpt, normalization.as_deref())?;
            match ckpt.kind {
                CheckpointKind::Segmentation => eval_seg(&ckpt, data_dir, out.as_deref()),
                CheckpointKind::Classification => eval_cls(
                    &ckpt,
                    data_dir,
                    labels_csv.as_deref(),
                    with_roi.as_deref(),
                    out.as_deref(),
                ),
            }
        }
        Command::Predict { checkpoint, image, out } => {
            cmd_predict(checkpoint, image, out.as_deref())
        }
        Command::Overlay {
            image,
            gt_mask,
            pred_mask,
            out,
        } => cmd_overlay(image, gt_mask, pred_mask, out),
        Command::Synth {
            config,
            out_dir,
            kind,
            seed,
        } => cmd_synth(config, out_dir, kind, *seed),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
