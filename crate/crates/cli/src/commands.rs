//! Subcommand bodies. Each resolves flags over the config file, validates
//! referenced paths, then delegates to the core library.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ganda_core::analysis::{compare_report, AnalysisConfig, Roi};
use ganda_core::inference::{merge_channels, predict_slide_batched, Provenance, DEFAULT_BATCH_SIZE};
use ganda_core::networks::{config_hash, load_checkpoint, save_checkpoint};
use ganda_core::phantom::{generate_dataset, DatasetManifest, Split, DATASET_MANIFEST};
use ganda_core::slide_io::{load_any, save_slide, write_gray_png};
use ganda_core::tiling::{read_store, write_store, DEFAULT_PATCH_SIZE, STORE_INDEX};
use ganda_core::training::{train_resumable, write_loss_log, PatchDataset};
use ganda_core::{Checkpoint, SlideImage, SourceMode, TrainConfig};
use serde::Serialize;

use crate::config::{RunConfig, SplitChoice};
use crate::{plots, CommonArgs, UserError};

pub const LOSS_LOG: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const REPORT: &str = "report.json";
pub const REPORT_SCHEMA: &str = "report.schema.json";
pub const RESIDUAL_PNG: &str = "residual.png";
pub const SCATTER_SVG: &str = "scatter.svg";
pub const HISTOGRAM_SVG: &str = "distance_hist.svg";

/// JSON schema of `report.json`, written next to every report.
pub const REPORT_SCHEMA_JSON: &str = include_str!("../report.schema.json");

pub struct Ctx {
    pub cfg: RunConfig,
    pub args: CommonArgs,
}

impl Ctx {
    fn seed(&self) -> Option<u64> {
        self.args.seed.or(self.cfg.seed)
    }

    fn source(&self) -> Option<SourceMode> {
        self.args.source.map(SourceMode::from).or(self.cfg.source)
    }

    /// Output directory, created if needed.
    fn out_dir(&self) -> Result<PathBuf> {
        let out = self
            .args
            .out
            .clone()
            .or_else(|| self.cfg.out.clone())
            .ok_or_else(|| UserError("an output directory is required (--out or `out` in the config)".into()))?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }

    /// Input paths, each checked to exist.
    fn inputs(&self) -> Result<Vec<PathBuf>> {
        let inputs = if self.args.input.is_empty() {
            self.cfg.input.clone()
        } else {
            self.args.input.clone()
        };
        if inputs.is_empty() {
            return Err(UserError("an input is required (--input or `input` in the config)".into()).into());
        }
        for p in &inputs {
            require_exists(p)?;
        }
        Ok(inputs)
    }

    fn single_input(&self, what: &str) -> Result<PathBuf> {
        let mut inputs = self.inputs()?;
        if inputs.len() != 1 {
            return Err(UserError(format!("expected exactly one {what} input, got {}", inputs.len())).into());
        }
        Ok(inputs.remove(0))
    }

    /// Loads slides; a dataset manifest (or a directory holding one) expands
    /// to the slides of `split`.
    fn load_slides(&self, split: SplitChoice) -> Result<Vec<SlideImage>> {
        let map = self.cfg.slide.channel_map();
        let mut slides = Vec::new();
        for path in self.inputs()? {
            let manifest_path = if path.is_dir() {
                path.join(DATASET_MANIFEST)
            } else {
                path.clone()
            };
            if manifest_path.file_name().is_some_and(|n| n == DATASET_MANIFEST) {
                let dir = manifest_path.parent().unwrap_or(Path::new("."));
                let manifest = DatasetManifest::load(&manifest_path)?;
                let splits: &[Split] = match split {
                    SplitChoice::Train => &[Split::Train],
                    SplitChoice::Test => &[Split::Test],
                    SplitChoice::All => &[Split::Train, Split::Test],
                };
                for entry in manifest.slides.iter().filter(|s| splits.contains(&s.split)) {
                    slides.push(load_any(&dir.join(&entry.file), &map, self.cfg.slide.pixel_size_um)?);
                }
            } else {
                slides.push(load_any(&path, &map, self.cfg.slide.pixel_size_um)?);
            }
        }
        if slides.is_empty() {
            return Err(UserError("inputs contain no slides".into()).into());
        }
        Ok(slides)
    }
}

fn require_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(UserError(format!("path not found: {}", p.display())).into())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn phantom(ctx: &Ctx) -> Result<()> {
    let mut params = ctx.cfg.phantom.clone();
    if let Some(seed) = ctx.seed() {
        params.seed = seed;
    }
    let out = ctx.out_dir()?;
    let ds = &ctx.cfg.dataset;
    let manifest = generate_dataset(ds.slides, ds.test_slides, &params, &out)?;
    println!(
        "wrote {} phantom slides ({} test) to {}",
        manifest.slides.len(),
        ds.test_slides,
        out.display()
    );
    Ok(())
}

pub fn preprocess(ctx: &Ctx) -> Result<()> {
    let slides = ctx.load_slides(ctx.cfg.preprocess.split)?;
    let patch = ctx
        .args
        .patch_size
        .or(ctx.cfg.preprocess.patch_size_px)
        .unwrap_or(DEFAULT_PATCH_SIZE);
    let out = ctx.out_dir()?;
    let manifests = write_store(&slides, patch, &out)?;
    for m in &manifests {
        println!(
            "{}: {} tiles of {patch} px, {} included",
            m.slide_id,
            m.records.len(),
            m.included_count()
        );
    }
    Ok(())
}

/// Newest `epoch_NNN.ckpt` in `dir`.
fn latest_epoch_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u32, PathBuf)> = None;
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse::<u32>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn epoch_checkpoint_name(epoch: u32) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Rejects resuming under a different network or training setup. The epoch
/// budget may grow.
fn check_resume(ckpt: &Checkpoint, hash: &str, source: SourceMode, cfg: &TrainConfig) -> Result<()> {
    if ckpt.config_hash() != hash {
        return Err(UserError("checkpoint was trained with different network specs".into()).into());
    }
    if ckpt.meta.source_mode != Some(source) {
        return Err(UserError(format!(
            "checkpoint was trained on {:?}, not {source:?}",
            ckpt.meta.source_mode
        ))
        .into());
    }
    let same = ckpt.meta.train_config.as_ref().is_some_and(|c| TrainConfig {
        epochs: cfg.epochs,
        ..c.clone()
    } == *cfg);
    if !same {
        return Err(UserError("checkpoint was trained with a different training config".into()).into());
    }
    Ok(())
}

pub fn train(ctx: &Ctx, resume: bool) -> Result<()> {
    let store_dir = ctx.single_input("patch store")?;
    if !store_dir.join(STORE_INDEX).is_file() {
        return Err(UserError(format!("{} is not a patch store (run `ganda preprocess`)", store_dir.display())).into());
    }
    let store = read_store(&store_dir)?;
    let patch = store.index.patch_size_px;
    if let Some(p) = ctx.args.patch_size.filter(|&p| p != patch) {
        return Err(UserError(format!("--patch-size {p} does not match the store's {patch} px tiles")).into());
    }
    let source = ctx.source().unwrap_or(SourceMode::Both);
    let mut cfg = ctx.cfg.train.clone();
    if let Some(seed) = ctx.seed() {
        cfg.seed = seed;
    }
    let mut gspec = ctx.cfg.generator.clone().unwrap_or_default();
    gspec.input_channels = source.channel_count();
    let mut dspec = ctx.cfg.discriminator.clone().unwrap_or_default();
    dspec.input_size_px = patch;
    dspec.input_channels = if cfg.conditional_discriminator {
        1 + source.channel_count()
    } else {
        1
    };
    gspec.validate()?;
    dspec.validate()?;
    cfg.validate()?;

    let out = ctx.out_dir()?;
    let resume_from = if resume {
        match latest_epoch_checkpoint(&out)? {
            Some(path) => {
                let ckpt = load_checkpoint(&path)?;
                check_resume(&ckpt, &config_hash(&gspec, &dspec), source, &cfg)?;
                log::info!("resuming from {} (epoch {})", path.display(), ckpt.meta.epoch);
                Some(ckpt)
            }
            None => {
                log::info!("no epoch checkpoint in {}; starting fresh", out.display());
                None
            }
        }
    } else {
        None
    };

    let dataset = PatchDataset::from_store(store);
    log::info!("training on {} tiles, source {source:?}", dataset.len());
    let mut save = |ckpt: &Checkpoint| -> ganda_core::Result<()> {
        save_checkpoint(ckpt, &out.join(epoch_checkpoint_name(ckpt.meta.epoch)))?;
        if ckpt.meta.is_final {
            save_checkpoint(ckpt, &out.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    };
    let outcome = train_resumable(&dataset, source, &gspec, &dspec, &cfg, resume_from.as_ref(), &mut save)?;
    write_loss_log(&outcome.losses, &out.join(LOSS_LOG))?;
    let fin = outcome.final_checkpoint();
    println!(
        "trained {source:?} for {} epochs ({} steps); checkpoints in {}",
        fin.meta.epoch,
        fin.meta.step,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionSidecar<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    checkpoint_file: &'a str,
    prediction_png: String,
    merged_slide: String,
}

pub fn predict(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let ckpt_path = checkpoint
        .or_else(|| ctx.cfg.predict.checkpoint.clone())
        .ok_or_else(|| UserError("a checkpoint is required (--checkpoint or [predict] checkpoint)".into()))?;
    require_exists(&ckpt_path)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let source = ctx
        .source()
        .or(ckpt.meta.source_mode)
        .unwrap_or(SourceMode::Both);
    let batch = ctx.cfg.predict.batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
    let slides = ctx.load_slides(SplitChoice::Test)?;
    let out = ctx.out_dir()?;
    for slide in &slides {
        let pred = predict_slide_batched(&ckpt, slide, source, batch)?;
        let id = slide.slide_id().to_string();
        let png = format!("{id}_np_pred.png");
        write_gray_png(&out.join(&png), &pred.predicted_np)?;
        let merged = merge_channels(slide, &pred)?;
        let merged_name = format!("{id}_merged.json");
        save_slide(&merged, &out.join(&merged_name))?;
        write_json(
            &out.join(format!("{id}_prediction.json")),
            &PredictionSidecar {
                provenance: pred.provenance(),
                checkpoint_file: &ckpt_path.to_string_lossy(),
                prediction_png: png,
                merged_slide: merged_name.clone(),
            },
        )?;
        println!("{id}: wrote {}", out.join(merged_name).display());
    }
    Ok(())
}

pub fn analyze(ctx: &Ctx, merged: Option<PathBuf>) -> Result<()> {
    let a = &ctx.cfg.analysis;
    let real_path = ctx.single_input("real slide")?;
    let merged_path = merged
        .or_else(|| a.merged.clone())
        .ok_or_else(|| UserError("a merged slide is required (--merged or [analysis] merged)".into()))?;
    require_exists(&merged_path)?;
    let map = ctx.cfg.slide.channel_map();
    let px = ctx.cfg.slide.pixel_size_um;
    let real = load_any(&real_path, &map, px)?;
    let pred = load_any(&merged_path, &map, px)?;
    if a.roi_size_px == 0 {
        return Err(UserError("roi_size_px must be positive".into()).into());
    }
    let cfg = AnalysisConfig {
        threshold: a.threshold,
        pixel_size_um: a.pixel_size_um.unwrap_or(real.pixel_size_um()),
        bin_width_um: a.bin_width_um,
    };
    let (w, h) = real.dims();
    let rois = Roi::grid(w, h, a.roi_size_px);
    let report = compare_report(&real, &pred, &rois, &cfg)?;
    let out = ctx.out_dir()?;
    write_json(&out.join(REPORT), &report)?;
    fs::write(out.join(REPORT_SCHEMA), REPORT_SCHEMA_JSON)?;
    if let Some(res) = &report.residual {
        write_gray_png(&out.join(RESIDUAL_PNG), res)?;
    }
    if ctx.args.plots {
        plots::scatter(&out.join(SCATTER_SVG), &report)?;
        plots::distance_histograms(&out.join(HISTOGRAM_SVG), &report)?;
    }
    println!(
        "MSE {:.3}, R^2 {:.4}, slope {:.4}, median distance {:.2} vs {:.2} um",
        report.mse,
        report.regression.r_squared,
        report.regression.slope,
        report.distance_real.median_um,
        report.distance_pred.median_um
    );
    Ok(())
}
