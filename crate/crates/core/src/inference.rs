//! Whole-slide prediction: tile, translate each included tile, reassemble.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GandaError, Result};
use crate::networks::{Checkpoint, Generator, Mode, Tensor};
use crate::raster::Plane;
use crate::slide_io::{ChannelPlane, ChannelRole, SlideImage, SourceMode};
use crate::tiling::{decompose_filtered, denormalize, normalize, recompose};

pub const DEFAULT_BATCH_SIZE: usize = 8;

/// Maps a normalized `[N, C, H, W]` batch to `[N, 1, H, W]` in [-1, 1].
pub trait PatchTranslator {
    fn input_channels(&self) -> usize;
    fn translate(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchTranslator for Generator<f32> {
    fn input_channels(&self) -> usize {
        self.spec().input_channels
    }

    fn translate(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(batch, Mode::Eval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    pub predicted_np: Plane,
    pub source_mode: SourceMode,
    /// Config hash of the checkpoint that produced the prediction.
    pub checkpoint_ref: String,
    /// Slide the prediction belongs to.
    pub manifest_ref: String,
}

/// JSON sidecar written next to a predicted channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_hash: String,
    pub source_mode: SourceMode,
    pub slide_id: String,
    pub width_px: usize,
    pub height_px: usize,
}

impl PredictionResult {
    pub fn provenance(&self) -> Provenance {
        Provenance {
            checkpoint_hash: self.checkpoint_ref.clone(),
            source_mode: self.source_mode,
            slide_id: self.manifest_ref.clone(),
            width_px: self.predicted_np.width(),
            height_px: self.predicted_np.height(),
        }
    }
}

/// Predicts the NP channel with the generator stored in `ckpt`, using the
/// discriminator's input size as the tile size.
pub fn predict_slide(ckpt: &Checkpoint, slide: &SlideImage, mode: SourceMode) -> Result<PredictionResult> {
    predict_slide_batched(ckpt, slide, mode, DEFAULT_BATCH_SIZE)
}

pub fn predict_slide_batched(
    ckpt: &Checkpoint,
    slide: &SlideImage,
    mode: SourceMode,
    batch_size: usize,
) -> Result<PredictionResult> {
    let expected = ckpt.generator_spec.input_channels;
    if expected != mode.channel_count() || ckpt.meta.source_mode.is_some_and(|m| m != mode) {
        return Err(GandaError::ChannelSpecMismatch {
            mode,
            expected,
            found: mode.channel_count(),
        });
    }
    let mut generator: Generator<f32> = ckpt.build_generator()?;
    let patch = ckpt.discriminator_spec.input_size_px;
    let mut result = predict_with(&mut generator, slide, mode, patch, batch_size)?;
    result.checkpoint_ref = ckpt.config_hash();
    Ok(result)
}

/// Runs `translator` over every included tile of `slide`, `batch_size`
/// tiles at a time. `checkpoint_ref` is left empty.
pub fn predict_with<P: PatchTranslator + ?Sized>(
    translator: &mut P,
    slide: &SlideImage,
    mode: SourceMode,
    patch_size_px: usize,
    batch_size: usize,
) -> Result<PredictionResult> {
    if translator.input_channels() != mode.channel_count() {
        return Err(GandaError::ChannelSpecMismatch {
            mode,
            expected: translator.input_channels(),
            found: mode.channel_count(),
        });
    }
    for &role in mode.roles() {
        slide.require(role)?;
    }
    let batch_size = batch_size.max(1);
    let (manifest, patches) = decompose_filtered(slide, patch_size_px)?;
    let included: Vec<_> = manifest
        .records
        .iter()
        .zip(&patches)
        .filter(|(r, _)| r.included)
        .map(|(_, p)| p)
        .collect();

    let mut tiles: HashMap<(usize, usize), Plane> = HashMap::with_capacity(included.len());
    for group in included.chunks(batch_size) {
        let tensors = group
            .par_iter()
            .map(|p| normalize(p, mode.roles()))
            .collect::<Result<Vec<_>>>()?;
        let c = mode.channel_count();
        let mut data = Vec::with_capacity(group.len() * c * patch_size_px * patch_size_px);
        for t in &tensors {
            data.extend_from_slice(&t.values);
        }
        let x = Tensor::from_vec([group.len(), c, patch_size_px, patch_size_px], data);
        let y = translator.translate(&x)?;
        let expect = [group.len(), 1, patch_size_px, patch_size_px];
        if y.shape != expect {
            return Err(GandaError::ShapeMismatch(format!(
                "translator returned {:?}, expected {expect:?}",
                y.shape
            )));
        }
        for (i, p) in group.iter().enumerate() {
            let out = crate::tiling::TensorPatch {
                height_px: patch_size_px,
                width_px: patch_size_px,
                channel_count: 1,
                values: y.sample(i).to_vec(),
            };
            let plane = denormalize(&out).remove(0);
            tiles.insert(p.key(), plane);
        }
    }
    let predicted_np = recompose(&manifest, &tiles)?;
    Ok(PredictionResult {
        predicted_np,
        source_mode: mode,
        checkpoint_ref: String::new(),
        manifest_ref: slide.slide_id().to_string(),
    })
}

/// Slide with the real nuclei and vessel channels and the predicted NP
/// channel, identified as `<slide_id>_merged`.
pub fn merge_channels(slide: &SlideImage, prediction: &PredictionResult) -> Result<SlideImage> {
    if prediction.predicted_np.dims() != slide.dims() {
        return Err(GandaError::ShapeMismatch(format!(
            "prediction {:?} vs slide {:?}",
            prediction.predicted_np.dims(),
            slide.dims()
        )));
    }
    let mut channels = Vec::with_capacity(3);
    for role in [ChannelRole::Nuclei, ChannelRole::Vessel] {
        channels.push(ChannelPlane {
            role,
            data: slide.require(role)?.clone(),
        });
    }
    channels.push(ChannelPlane {
        role: ChannelRole::Np,
        data: prediction.predicted_np.clone(),
    });
    SlideImage::new(format!("{}_merged", slide.slide_id()), slide.pixel_size_um(), channels)
}
