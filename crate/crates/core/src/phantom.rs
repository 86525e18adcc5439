//! Synthetic slides with a known forward model: vessels are dilated random
//! walks, nuclei are random disks, and the NP channel decays exponentially
//! with distance from the nearest vessel pixel.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{distance_stats, squared_distance_px, DistanceStats, DEFAULT_BIN_WIDTH_UM};
use crate::error::{GandaError, Result};
use crate::raster::{Mask, Plane, Raster};
use crate::slide_io::{save_slide, ChannelPlane, ChannelRole, SlideImage};
use crate::training::derive_seed;

const VESSEL_INTENSITY: u8 = 220;
const NUCLEI_INTENSITY: std::ops::RangeInclusive<u8> = 150..=230;
const WALK_STEP_PX: f64 = 5.0;
const WALK_TURN_RAD: f64 = std::f64::consts::PI / 6.0;

pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub width_px: usize,
    pub height_px: usize,
    pub vessel_segment_count: usize,
    /// Random-walk steps per vessel segment.
    pub vessel_walk_steps: usize,
    pub vessel_thickness_px: usize,
    pub nuclei_count: usize,
    pub nuclei_radius_px: usize,
    /// Decay length λ of the NP signal, in µm.
    pub decay_length_um: f64,
    pub np_peak_intensity: u32,
    pub noise_sigma: f64,
    pub pixel_size_um: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            width_px: 1024,
            height_px: 1024,
            vessel_segment_count: 10,
            vessel_walk_steps: 40,
            vessel_thickness_px: 6,
            nuclei_count: 1500,
            nuclei_radius_px: 4,
            decay_length_um: 12.0,
            np_peak_intensity: 200,
            noise_sigma: 4.0,
            pixel_size_um: 1.0,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GandaError::InvalidParams(m.to_string()));
        if self.width_px == 0 || self.height_px == 0 {
            return bad("slide extent must be positive");
        }
        if self.vessel_segment_count == 0 || self.vessel_walk_steps == 0 || self.vessel_thickness_px == 0 {
            return bad("vessel segment count, walk steps and thickness must be positive");
        }
        if self.nuclei_radius_px == 0 {
            return bad("nuclei radius must be positive");
        }
        if !(1..=255).contains(&self.np_peak_intensity) {
            return bad("np_peak_intensity must lie in [1, 255]");
        }
        if !(self.decay_length_um > 0.0) || self.decay_length_um.is_nan() {
            return bad("decay length must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be non-negative");
        }
        if !(self.pixel_size_um > 0.0 && self.pixel_size_um.is_finite()) {
            return bad("pixel size must be positive");
        }
        Ok(())
    }

    pub fn decay_length_px(&self) -> f64 {
        self.decay_length_um / self.pixel_size_um
    }
}

/// Noise-free quantities behind a phantom slide.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `s * exp(-d / λ_px)` before noise and quantization.
    pub np_field: Raster<f64>,
    pub vessel_mask: Mask,
    pub nuclei_mask: Mask,
}

impl GroundTruth {
    /// NP channel the slide would have with zero noise.
    pub fn noiseless_np(&self) -> Plane {
        self.np_field.map(|&v| quantize(v))
    }
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Marks pixels along the segment `a`→`b`, sampled every half pixel.
fn draw_segment(mask: &mut Mask, a: (f64, f64), b: (f64, f64)) {
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let n = (len * 2.0).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = (a.0 + (b.0 - a.0) * t).round();
        let y = (a.1 + (b.1 - a.1) * t).round();
        if x >= 0.0 && y >= 0.0 && x < w && y < h {
            mask.set(x as usize, y as usize, true);
        }
    }
}

fn vessel_geometry(p: &PhantomParams, rng: &mut ChaCha8Rng) -> Mask {
    let mut center = Mask::filled(p.width_px, p.height_px, false);
    for _ in 0..p.vessel_segment_count {
        let mut pos = (
            rng.random_range(0.0..p.width_px as f64),
            rng.random_range(0.0..p.height_px as f64),
        );
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..p.vessel_walk_steps {
            heading += rng.random_range(-WALK_TURN_RAD..=WALK_TURN_RAD);
            let next = (pos.0 + WALK_STEP_PX * heading.cos(), pos.1 + WALK_STEP_PX * heading.sin());
            draw_segment(&mut center, pos, next);
            pos = next;
        }
    }
    if center.count_true() == 0 {
        // Every walk left the frame; keep one vessel pixel so distances exist.
        center.set(p.width_px / 2, p.height_px / 2, true);
    }
    let r = p.vessel_thickness_px as f64 / 2.0;
    let r2 = r * r;
    let sq = squared_distance_px(&center).expect("non-empty centerline");
    sq.map(|&d| d <= r2)
}

fn nuclei(p: &PhantomParams, rng: &mut ChaCha8Rng) -> (Plane, Mask) {
    let mut plane = Plane::filled(p.width_px, p.height_px, 0);
    let r = p.nuclei_radius_px as i64;
    for _ in 0..p.nuclei_count {
        let cx = rng.random_range(0..p.width_px) as i64;
        let cy = rng.random_range(0..p.height_px) as i64;
        let v = rng.random_range(NUCLEI_INTENSITY);
        for y in (cy - r).max(0)..=(cy + r).min(p.height_px as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(p.width_px as i64 - 1) {
                if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                    plane.set(x as usize, y as usize, v);
                }
            }
        }
    }
    let mask = plane.map(|&v| v > 0);
    (plane, mask)
}

/// Generates one slide and its ground truth from `params` (including seed).
pub fn generate_phantom(params: &PhantomParams) -> Result<(SlideImage, GroundTruth)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let vessel_mask = vessel_geometry(params, &mut rng);
    let (nuclei_plane, nuclei_mask) = nuclei(params, &mut rng);

    let s = params.np_peak_intensity as f64;
    let lambda = params.decay_length_px();
    let sq = squared_distance_px(&vessel_mask)?;
    let np_field = sq.map(|&d2| s * (-d2.sqrt() / lambda).exp());
    let np = if params.noise_sigma > 0.0 {
        let sigma = params.noise_sigma;
        np_field.map(|&v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            quantize(v + sigma * n)
        })
    } else {
        np_field.map(|&v| quantize(v))
    };
    let vessel_plane = vessel_mask.map(|&b| if b { VESSEL_INTENSITY } else { 0 });

    let slide = SlideImage::new(
        format!("phantom_{:016x}", params.seed),
        params.pixel_size_um,
        vec![
            ChannelPlane {
                role: ChannelRole::Nuclei,
                data: nuclei_plane,
            },
            ChannelPlane {
                role: ChannelRole::Vessel,
                data: vessel_plane,
            },
            ChannelPlane {
                role: ChannelRole::Np,
                data: np,
            },
        ],
    )?;
    Ok((
        slide,
        GroundTruth {
            np_field,
            vessel_mask,
            nuclei_mask,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSlide {
    pub slide_id: String,
    /// Sidecar JSON, relative to the dataset directory.
    pub file: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub params: PhantomParams,
    pub slides: Vec<DatasetSlide>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GandaError::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| GandaError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn paths(&self, dir: &Path, split: Split) -> Vec<PathBuf> {
        self.slides.iter().filter(|s| s.split == split).map(|s| dir.join(&s.file)).collect()
    }
}

/// Seed of slide `index` under `master_seed`.
pub fn slide_seed(master_seed: u64, index: usize) -> u64 {
    derive_seed(master_seed, 0x5EED_0000 + index as u64)
}

/// Params for each slide of a dataset: `params` with per-slide seeds.
pub fn dataset_params(n_slides: usize, params: &PhantomParams) -> Vec<PhantomParams> {
    (0..n_slides)
        .map(|i| PhantomParams {
            seed: slide_seed(params.seed, i),
            ..params.clone()
        })
        .collect()
}

/// Writes `n_slides` phantoms into `out_dir`; the last `test_count` are the
/// test split. `params.seed` is the master seed.
pub fn generate_dataset(n_slides: usize, test_count: usize, params: &PhantomParams, out_dir: &Path) -> Result<DatasetManifest> {
    if n_slides < 2 || test_count == 0 || test_count >= n_slides {
        return Err(GandaError::InvalidParams(format!(
            "need at least one train and one test slide, got {n_slides} slides with {test_count} for testing"
        )));
    }
    params.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| GandaError::io(out_dir, e))?;
    let mut slides = Vec::with_capacity(n_slides);
    for (i, p) in dataset_params(n_slides, params).into_iter().enumerate() {
        let (slide, _) = generate_phantom(&p)?;
        let id = format!("phantom{i:02}");
        let file = format!("{id}.json");
        save_slide(&slide.with_slide_id(&id), &out_dir.join(&file))?;
        slides.push(DatasetSlide {
            slide_id: id,
            file,
            seed: p.seed,
            split: if i + test_count >= n_slides { Split::Test } else { Split::Train },
        });
    }
    let manifest = DatasetManifest {
        master_seed: params.seed,
        params: params.clone(),
        slides,
    };
    let path = out_dir.join(DATASET_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| GandaError::io(&path, e))?;
    Ok(manifest)
}

/// Exact distance distribution of pixels whose noiseless NP value exceeds
/// `threshold`, by scanning every vessel pixel for each such pixel.
/// Quadratic cost: intended for small phantoms.
pub fn analytic_distance_quantiles(params: &PhantomParams, truth: &GroundTruth, threshold: f64) -> DistanceStats {
    let (w, h) = truth.vessel_mask.dims();
    let vessels: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| *truth.vessel_mask.get(x, y))
        .map(|(x, y)| (x as f64, y as f64))
        .collect();
    let mut samples = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if *truth.np_field.get(x, y) <= threshold {
                continue;
            }
            let (px, py) = (x as f64, y as f64);
            let best = vessels
                .iter()
                .map(|&(vx, vy)| (px - vx).powi(2) + (py - vy).powi(2))
                .fold(f64::INFINITY, f64::min);
            samples.push(best.sqrt() * params.pixel_size_um);
        }
    }
    distance_stats(samples, DEFAULT_BIN_WIDTH_UM)
}
