//! Quantitative readouts: channel densities, predicted-vs-real regression,
//! MSE/residual maps, and vessel-distance (extravasation) statistics.

mod edt;
mod regression;

use serde::{Deserialize, Serialize};

pub use edt::{euclidean_distance_transform, squared_distance_px};
pub use regression::{linear_regression, RegressionResult};

use crate::error::{GandaError, Result};
use crate::raster::{Mask, Plane};
use crate::slide_io::{ChannelRole, SlideImage};

pub const DEFAULT_THRESHOLD: u8 = 10;
pub const DEFAULT_BIN_WIDTH_UM: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x_px: usize,
    pub y_px: usize,
    pub width_px: usize,
    pub height_px: usize,
}

impl Roi {
    pub fn new(x_px: usize, y_px: usize, width_px: usize, height_px: usize) -> Self {
        Roi {
            x_px,
            y_px,
            width_px,
            height_px,
        }
    }

    /// Non-overlapping `size`×`size` ROIs covering as much of a
    /// `width`×`height` slide as fits, row-major.
    pub fn grid(width: usize, height: usize, size: usize) -> Vec<Roi> {
        if size == 0 {
            return Vec::new();
        }
        (0..height / size)
            .flat_map(|r| (0..width / size).map(move |c| Roi::new(c * size, r * size, size, size)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Region {
    Whole,
    Roi(Roi),
}

pub fn positive_mask(channel: &Plane, threshold: u8) -> Mask {
    channel.map(|&v| v > threshold)
}

/// Fraction of pixels in `region` strictly above `threshold`.
pub fn density(channel: &Plane, region: Region, threshold: u8) -> Result<f64> {
    let (w, h) = channel.dims();
    let roi = match region {
        Region::Whole => Roi::new(0, 0, w, h),
        Region::Roi(r) => r,
    };
    if roi.width_px == 0 || roi.height_px == 0 {
        return Err(GandaError::EmptyRegion);
    }
    if roi.x_px + roi.width_px > w || roi.y_px + roi.height_px > h {
        return Err(GandaError::RegionOutOfBounds(format!(
            "{}x{} at ({}, {}) exceeds {w}x{h}",
            roi.width_px, roi.height_px, roi.x_px, roi.y_px
        )));
    }
    let positive: usize = (roi.y_px..roi.y_px + roi.height_px)
        .map(|y| {
            channel.row(y)[roi.x_px..roi.x_px + roi.width_px]
                .iter()
                .filter(|&&v| v > threshold)
                .count()
        })
        .sum();
    Ok(positive as f64 / (roi.width_px * roi.height_px) as f64)
}

fn check_same(a: &Plane, b: &Plane) -> Result<()> {
    if !a.same_dims(b) {
        return Err(GandaError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Mean squared difference of 8-bit intensities.
pub fn mse(a: &Plane, b: &Plane) -> Result<f64> {
    check_same(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Per-pixel absolute difference.
pub fn residual_map(a: &Plane, b: &Plane) -> Result<Plane> {
    check_same(a, b)?;
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&p, &q)| p.abs_diff(q)).collect();
    Plane::from_vec(a.width(), a.height(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges_um: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    #[serde(rename = "q1")]
    pub q1_um: f64,
    #[serde(rename = "median")]
    pub median_um: f64,
    #[serde(rename = "mean")]
    pub mean_um: f64,
    #[serde(rename = "q3")]
    pub q3_um: f64,
    pub n_pixels: usize,
    pub histogram: Histogram,
    /// Set when there were no NP-positive pixels; the statistics are then 0.
    pub empty: bool,
}

/// Quantile of sorted data with linear interpolation at rank `(n - 1) q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = (n - 1) as f64 * q.clamp(0.0, 1.0);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

/// Summary statistics and a fixed-width histogram (starting at 0) of
/// distance samples.
pub fn distance_stats(mut samples: Vec<f64>, bin_width_um: f64) -> DistanceStats {
    if samples.is_empty() {
        return DistanceStats {
            q1_um: 0.0,
            median_um: 0.0,
            mean_um: 0.0,
            q3_um: 0.0,
            n_pixels: 0,
            histogram: Histogram {
                edges_um: vec![0.0],
                counts: Vec::new(),
            },
            empty: true,
        };
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let max = samples[n - 1];
    let bins = (max / bin_width_um).floor() as usize + 1;
    let mut counts = vec![0u64; bins];
    for &s in &samples {
        counts[((s / bin_width_um).floor() as usize).min(bins - 1)] += 1;
    }
    DistanceStats {
        q1_um: quantile_sorted(&samples, 0.25),
        median_um: quantile_sorted(&samples, 0.5),
        mean_um: samples.iter().sum::<f64>() / n as f64,
        q3_um: quantile_sorted(&samples, 0.75),
        n_pixels: n,
        histogram: Histogram {
            edges_um: (0..=bins).map(|i| i as f64 * bin_width_um).collect(),
            counts,
        },
        empty: false,
    }
}

/// Distances from each NP-positive pixel to the nearest vessel pixel.
pub fn extravasation_distances(np_mask: &Mask, vessel_mask: &Mask, pixel_size_um: f64) -> Result<Vec<f64>> {
    if !np_mask.same_dims(vessel_mask) {
        return Err(GandaError::ShapeMismatch("NP and vessel masks differ in size".into()));
    }
    let dist = euclidean_distance_transform(vessel_mask, pixel_size_um)?;
    Ok(np_mask
        .as_slice()
        .iter()
        .zip(dist.as_slice())
        .filter(|(&m, _)| m)
        .map(|(_, &d)| d)
        .collect())
}

pub fn extravasation_stats(np_mask: &Mask, vessel_mask: &Mask, pixel_size_um: f64) -> Result<DistanceStats> {
    extravasation_stats_binned(np_mask, vessel_mask, pixel_size_um, DEFAULT_BIN_WIDTH_UM)
}

pub fn extravasation_stats_binned(
    np_mask: &Mask,
    vessel_mask: &Mask,
    pixel_size_um: f64,
    bin_width_um: f64,
) -> Result<DistanceStats> {
    if !(bin_width_um > 0.0 && bin_width_um.is_finite()) {
        return Err(GandaError::InvalidParams(format!("bin width {bin_width_um}")));
    }
    Ok(distance_stats(
        extravasation_distances(np_mask, vessel_mask, pixel_size_um)?,
        bin_width_um,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub threshold: u8,
    pub pixel_size_um: f64,
    #[serde(rename = "bins")]
    pub bin_width_um: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            threshold: DEFAULT_THRESHOLD,
            pixel_size_um: 1.0,
            bin_width_um: DEFAULT_BIN_WIDTH_UM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub region: String,
    pub cell: f64,
    pub vessel: f64,
    pub np_real: f64,
    pub np_pred: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub densities: Vec<DensityRow>,
    pub regression: RegressionResult,
    pub mse: f64,
    pub distance_real: DistanceStats,
    pub distance_pred: DistanceStats,
    pub config: AnalysisConfig,
    #[serde(skip)]
    pub residual: Option<Plane>,
}

/// Compares the NP channel of `merged` against that of `real` over the whole
/// slide and each ROI. Cell and vessel densities come from `real`.
pub fn compare_report(real: &SlideImage, merged: &SlideImage, rois: &[Roi], cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    if real.dims() != merged.dims() {
        return Err(GandaError::ShapeMismatch(format!(
            "real slide {:?} vs merged slide {:?}",
            real.dims(),
            merged.dims()
        )));
    }
    let nuclei = real.require(ChannelRole::Nuclei)?;
    let vessel = real.require(ChannelRole::Vessel)?;
    let np_real = real.require(ChannelRole::Np)?;
    let np_pred = merged.require(ChannelRole::Np)?;
    let vessel_pred = merged.require(ChannelRole::Vessel)?;
    let t = cfg.threshold;

    let regions = std::iter::once(("whole".to_string(), Region::Whole))
        .chain(rois.iter().enumerate().map(|(i, r)| (format!("roi{i}"), Region::Roi(*r))));
    let mut densities = Vec::with_capacity(rois.len() + 1);
    for (name, region) in regions {
        densities.push(DensityRow {
            region: name,
            cell: density(nuclei, region, t)?,
            vessel: density(vessel, region, t)?,
            np_real: density(np_real, region, t)?,
            np_pred: density(np_pred, region, t)?,
        });
    }
    let xs: Vec<f64> = densities.iter().map(|d| d.np_real).collect();
    let ys: Vec<f64> = densities.iter().map(|d| d.np_pred).collect();
    let regression = linear_regression(&xs, &ys)?;

    let px = cfg.pixel_size_um;
    let distance_real = extravasation_stats_binned(&positive_mask(np_real, t), &positive_mask(vessel, t), px, cfg.bin_width_um)?;
    let distance_pred = extravasation_stats_binned(
        &positive_mask(np_pred, t),
        &positive_mask(vessel_pred, t),
        px,
        cfg.bin_width_um,
    )?;
    Ok(AnalysisReport {
        densities,
        regression,
        mse: mse(np_real, np_pred)?,
        distance_real,
        distance_pred,
        config: cfg.clone(),
        residual: Some(residual_map(np_real, np_pred)?),
    })
}
