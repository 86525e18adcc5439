//! Zero-padding, non-overlapping tile decomposition, the empty-tile exclusion
//! rule, [-1, 1] normalization and exact recomposition.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GandaError, Result};
use crate::raster::{Plane, Raster};
use crate::slide_io::{ChannelPlane, ChannelRole, SlideImage};

pub const DEFAULT_PATCH_SIZE: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub slide_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
    pub origin_x_px: usize,
    pub origin_y_px: usize,
    pub included: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub slide_id: String,
    pub patch_size_px: usize,
    pub original_width_px: usize,
    pub original_height_px: usize,
    pub padded_width_px: usize,
    pub padded_height_px: usize,
    pub records: Vec<PatchRecord>,
}

impl PatchManifest {
    pub fn grid_cols(&self) -> usize {
        self.padded_width_px / self.patch_size_px
    }

    pub fn grid_rows(&self) -> usize {
        self.padded_height_px / self.patch_size_px
    }

    pub fn included(&self) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(|r| r.included)
    }

    pub fn included_count(&self) -> usize {
        self.included().count()
    }
}

/// One tile of a slide, every channel cropped to the same window.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPatch {
    pub grid_row: usize,
    pub grid_col: usize,
    pub channels: Vec<ChannelPlane>,
}

impl RawPatch {
    pub fn channel(&self, role: ChannelRole) -> Option<&Plane> {
        self.channels.iter().find(|c| c.role == role).map(|c| &c.data)
    }

    pub fn require(&self, role: ChannelRole) -> Result<&Plane> {
        self.channel(role).ok_or(GandaError::MissingChannel(role))
    }

    pub fn key(&self) -> (usize, usize) {
        (self.grid_row, self.grid_col)
    }
}

/// Network-ready patch: channel-major (C, H, W) values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct TensorPatch {
    pub height_px: usize,
    pub width_px: usize,
    pub channel_count: usize,
    pub values: Vec<f32>,
}

impl TensorPatch {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height_px * self.width_px;
        &self.values[c * n..(c + 1) * n]
    }
}

fn ceil_multiple(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Smallest multiples of `patch_size_px` covering `(width, height)`.
pub fn padded_dims(width: usize, height: usize, patch_size_px: usize) -> (usize, usize) {
    (
        ceil_multiple(width, patch_size_px),
        ceil_multiple(height, patch_size_px),
    )
}

/// Appends zero columns on the right and zero rows at the bottom.
pub fn pad_to_multiple(slide: &SlideImage, patch_size_px: usize) -> Result<SlideImage> {
    check_patch_size(patch_size_px)?;
    let (pw, ph) = padded_dims(slide.width_px(), slide.height_px(), patch_size_px);
    if (pw, ph) == slide.dims() {
        return Ok(slide.clone());
    }
    let channels = slide
        .channels()
        .iter()
        .map(|c| ChannelPlane {
            role: c.role,
            data: c.data.window(0, 0, pw, ph),
        })
        .collect();
    SlideImage::new(slide.slide_id(), slide.pixel_size_um(), channels)
}

fn check_patch_size(patch_size_px: usize) -> Result<()> {
    if patch_size_px == 0 {
        return Err(GandaError::InvalidParams("patch size must be positive".into()));
    }
    Ok(())
}

/// Builds the manifest for a slide of the given size, every tile included.
pub fn plan_grid(slide_id: &str, width: usize, height: usize, patch_size_px: usize) -> Result<PatchManifest> {
    check_patch_size(patch_size_px)?;
    let (pw, ph) = padded_dims(width, height, patch_size_px);
    let (rows, cols) = (ph / patch_size_px, pw / patch_size_px);
    let records = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| PatchRecord {
            slide_id: slide_id.to_string(),
            grid_row: r,
            grid_col: c,
            origin_x_px: c * patch_size_px,
            origin_y_px: r * patch_size_px,
            included: true,
        })
        .collect();
    Ok(PatchManifest {
        slide_id: slide_id.to_string(),
        patch_size_px,
        original_width_px: width,
        original_height_px: height,
        padded_width_px: pw,
        padded_height_px: ph,
        records,
    })
}

/// Splits the (implicitly padded) slide into row-major tiles. All records
/// start out included; see [`filter_empty`].
pub fn decompose(slide: &SlideImage, patch_size_px: usize) -> Result<(PatchManifest, Vec<RawPatch>)> {
    let manifest = plan_grid(slide.slide_id(), slide.width_px(), slide.height_px(), patch_size_px)?;
    let patches = manifest
        .records
        .par_iter()
        .map(|r| RawPatch {
            grid_row: r.grid_row,
            grid_col: r.grid_col,
            channels: slide
                .channels()
                .iter()
                .map(|c| ChannelPlane {
                    role: c.role,
                    data: c.data.window(r.origin_x_px, r.origin_y_px, patch_size_px, patch_size_px),
                })
                .collect(),
        })
        .collect();
    Ok((manifest, patches))
}

/// Marks a tile excluded exactly when its NUCLEI and VESSEL pixels sum to 0.
pub fn filter_empty(manifest: &PatchManifest, patches: &[RawPatch]) -> Result<PatchManifest> {
    let mut keep: HashMap<(usize, usize), bool> = HashMap::with_capacity(patches.len());
    for p in patches {
        let nuclei = p.require(ChannelRole::Nuclei)?;
        let vessel = p.require(ChannelRole::Vessel)?;
        let any = nuclei.as_slice().iter().any(|&v| v != 0) || vessel.as_slice().iter().any(|&v| v != 0);
        keep.insert(p.key(), any);
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.included = keep.get(&(r.grid_row, r.grid_col)).copied().unwrap_or(false);
    }
    Ok(out)
}

/// Decompose then apply the exclusion rule.
pub fn decompose_filtered(slide: &SlideImage, patch_size_px: usize) -> Result<(PatchManifest, Vec<RawPatch>)> {
    let (manifest, patches) = decompose(slide, patch_size_px)?;
    let manifest = filter_empty(&manifest, &patches)?;
    Ok((manifest, patches))
}

#[inline]
pub fn normalize_value(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

#[inline]
pub fn denormalize_value(v: f32) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Stacks the planes of `roles` (in order) into a [-1, 1] tensor patch.
pub fn normalize(patch: &RawPatch, roles: &[ChannelRole]) -> Result<TensorPatch> {
    let planes = roles
        .iter()
        .map(|&r| patch.require(r))
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_planes(&planes))
}

pub fn normalize_planes(planes: &[&Plane]) -> TensorPatch {
    let (w, h) = planes.first().map(|p| p.dims()).unwrap_or((0, 0));
    let values = planes
        .iter()
        .flat_map(|p| p.as_slice().iter().map(|&v| normalize_value(v)))
        .collect();
    TensorPatch {
        height_px: h,
        width_px: w,
        channel_count: planes.len(),
        values,
    }
}

/// Inverse of [`normalize`], clamping out-of-range values; one plane per channel.
pub fn denormalize(patch: &TensorPatch) -> Vec<Plane> {
    (0..patch.channel_count)
        .map(|c| {
            let data = patch.channel(c).iter().map(|&v| denormalize_value(v)).collect();
            Raster::from_vec(patch.width_px, patch.height_px, data).expect("tensor patch dims")
        })
        .collect()
}

/// Places single-channel tiles at their recorded origins. Tiles missing from
/// `patches` that the manifest excludes stay zero; the result is cropped back
/// to the original slide size.
pub fn recompose(manifest: &PatchManifest, patches: &HashMap<(usize, usize), Plane>) -> Result<Plane> {
    let p = manifest.patch_size_px;
    let mut out = Raster::filled(manifest.padded_width_px, manifest.padded_height_px, 0u8);
    for r in &manifest.records {
        match patches.get(&(r.grid_row, r.grid_col)) {
            Some(tile) => {
                if tile.dims() != (p, p) {
                    return Err(GandaError::ShapeMismatch(format!(
                        "tile ({}, {}) is {}x{}, expected {p}x{p}",
                        r.grid_row,
                        r.grid_col,
                        tile.width(),
                        tile.height()
                    )));
                }
                out.paste(tile, r.origin_x_px, r.origin_y_px);
            }
            None if r.included => {
                return Err(GandaError::MissingPatch {
                    row: r.grid_row,
                    col: r.grid_col,
                })
            }
            None => {}
        }
    }
    Ok(out.window(0, 0, manifest.original_width_px, manifest.original_height_px))
}

// ---------------------------------------------------------------------------
// Patch store: per-tile RGB PNGs (R=NP, G=VESSEL, B=NUCLEI) plus manifests.

pub const STORE_INDEX: &str = "store.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreIndex {
    pub patch_size_px: usize,
    pub slides: Vec<StoreSlide>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreSlide {
    pub slide_id: String,
    pub pixel_size_um: f64,
    pub original_width_px: usize,
    pub original_height_px: usize,
    pub padded_width_px: usize,
    pub padded_height_px: usize,
    pub manifest: String,
}

pub fn patch_file_name(slide_id: &str, row: usize, col: usize) -> String {
    format!("{slide_id}_{row}_{col}.png")
}

pub fn manifest_file_name(slide_id: &str) -> String {
    format!("{slide_id}_manifest.csv")
}

/// Writes the manifest rows as CSV with the documented header.
pub fn write_manifest_csv(manifest: &PatchManifest, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &manifest.records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| GandaError::io(path, e))
}

pub fn read_manifest_csv(path: &Path) -> Result<Vec<PatchRecord>> {
    if !path.exists() {
        return Err(GandaError::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(GandaError::from)).collect()
}

const STORE_ROLE_ORDER: [ChannelRole; 3] = [ChannelRole::Np, ChannelRole::Vessel, ChannelRole::Nuclei];

fn write_patch_png(path: &Path, patch: &RawPatch, size: usize) -> Result<()> {
    let mut rgb = vec![0u8; size * size * 3];
    for (k, role) in STORE_ROLE_ORDER.iter().enumerate() {
        if let Some(p) = patch.channel(*role) {
            for (i, &v) in p.as_slice().iter().enumerate() {
                rgb[i * 3 + k] = v;
            }
        }
    }
    let img = image::RgbImage::from_raw(size as u32, size as u32, rgb)
        .ok_or_else(|| GandaError::ShapeMismatch("patch buffer".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| GandaError::codec(path, e))
}

fn read_patch_png(path: &Path, row: usize, col: usize) -> Result<RawPatch> {
    let img = image::open(path).map_err(|e| GandaError::codec(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let channels = STORE_ROLE_ORDER
        .iter()
        .enumerate()
        .map(|(k, &role)| {
            let data = raw.iter().skip(k).step_by(3).copied().collect();
            Ok(ChannelPlane {
                role,
                data: Raster::from_vec(w, h, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawPatch {
        grid_row: row,
        grid_col: col,
        channels,
    })
}

/// Decomposes `slide`, applies the exclusion rule and writes included tiles
/// plus the manifest CSV into `dir`. Returns the manifest.
pub fn write_slide_patches(slide: &SlideImage, patch_size_px: usize, dir: &Path) -> Result<PatchManifest> {
    fs::create_dir_all(dir).map_err(|e| GandaError::io(dir, e))?;
    let (manifest, patches) = decompose_filtered(slide, patch_size_px)?;
    let included: Vec<_> = patches
        .iter()
        .zip(&manifest.records)
        .filter(|(_, r)| r.included)
        .collect();
    included.par_iter().try_for_each(|(p, r)| {
        let path = dir.join(patch_file_name(&r.slide_id, r.grid_row, r.grid_col));
        write_patch_png(&path, p, patch_size_px)
    })?;
    write_manifest_csv(&manifest, &dir.join(manifest_file_name(slide.slide_id())))?;
    Ok(manifest)
}

/// Writes a patch store for several slides and its `store.json` index.
pub fn write_store(slides: &[SlideImage], patch_size_px: usize, dir: &Path) -> Result<Vec<PatchManifest>> {
    let mut index = StoreIndex {
        patch_size_px,
        slides: Vec::new(),
    };
    let mut manifests = Vec::new();
    for slide in slides {
        let m = write_slide_patches(slide, patch_size_px, dir)?;
        index.slides.push(StoreSlide {
            slide_id: m.slide_id.clone(),
            pixel_size_um: slide.pixel_size_um(),
            original_width_px: m.original_width_px,
            original_height_px: m.original_height_px,
            padded_width_px: m.padded_width_px,
            padded_height_px: m.padded_height_px,
            manifest: manifest_file_name(&m.slide_id),
        });
        manifests.push(m);
    }
    let path = dir.join(STORE_INDEX);
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| GandaError::io(&path, e))?;
    Ok(manifests)
}

/// A patch store read back into memory.
#[derive(Clone, Debug)]
pub struct LoadedStore {
    pub dir: PathBuf,
    pub index: StoreIndex,
    pub manifests: Vec<PatchManifest>,
    /// Included tiles of every slide, in manifest order.
    pub patches: Vec<RawPatch>,
}

pub fn read_store(dir: &Path) -> Result<LoadedStore> {
    let index_path = dir.join(STORE_INDEX);
    if !index_path.exists() {
        return Err(GandaError::MissingFile(index_path));
    }
    let text = fs::read_to_string(&index_path).map_err(|e| GandaError::io(&index_path, e))?;
    let index: StoreIndex = serde_json::from_str(&text)?;
    let mut manifests = Vec::new();
    let mut patches = Vec::new();
    for s in &index.slides {
        let records = read_manifest_csv(&dir.join(&s.manifest))?;
        let manifest = PatchManifest {
            slide_id: s.slide_id.clone(),
            patch_size_px: index.patch_size_px,
            original_width_px: s.original_width_px,
            original_height_px: s.original_height_px,
            padded_width_px: s.padded_width_px,
            padded_height_px: s.padded_height_px,
            records,
        };
        let tiles = manifest
            .included()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|r| {
                read_patch_png(
                    &dir.join(patch_file_name(&r.slide_id, r.grid_row, r.grid_col)),
                    r.grid_row,
                    r.grid_col,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        patches.extend(tiles);
        manifests.push(manifest);
    }
    Ok(LoadedStore {
        dir: dir.to_path_buf(),
        index,
        manifests,
        patches,
    })
}
