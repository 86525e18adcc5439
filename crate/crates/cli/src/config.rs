//! TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ganda_core::analysis::{DEFAULT_BIN_WIDTH_UM, DEFAULT_THRESHOLD};
use ganda_core::slide_io::ChannelRole;
use ganda_core::{DiscriminatorSpec, GeneratorSpec, PhantomParams, SourceMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UserError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; `--seed` overrides it.
    pub seed: Option<u64>,
    /// Log verbosity when `GANDA_LOG` is unset.
    pub log: Option<String>,
    /// Input paths; `--input` overrides them.
    pub input: Vec<PathBuf>,
    /// Output directory; `--out` overrides it.
    pub out: Option<PathBuf>,
    /// Source channels for training and prediction; `--source` overrides it.
    pub source: Option<SourceMode>,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub slide: SlideSection,
    pub phantom: PhantomParams,
    pub dataset: DatasetSection,
    pub preprocess: PreprocessSection,
    pub train: TrainConfig,
    pub generator: Option<GeneratorSpec>,
    pub discriminator: Option<DiscriminatorSpec>,
    pub predict: PredictSection,
    pub analysis: AnalysisSection,
}

/// How raster (TIFF/PNG) slides map planes to channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideSection {
    /// Channel role of each plane, in plane order.
    pub planes: Vec<ChannelRole>,
    pub pixel_size_um: f64,
}

impl Default for SlideSection {
    fn default() -> Self {
        SlideSection {
            planes: ChannelRole::ALL.to_vec(),
            pixel_size_um: 1.0,
        }
    }
}

impl SlideSection {
    pub fn channel_map(&self) -> Vec<(ChannelRole, usize)> {
        self.planes.iter().enumerate().map(|(i, &r)| (r, i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub slides: usize,
    pub test_slides: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            slides: 6,
            test_slides: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    #[default]
    Train,
    Test,
    All,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub patch_size_px: Option<usize>,
    /// Which slides of a dataset manifest to tile.
    pub split: SplitChoice,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub checkpoint: Option<PathBuf>,
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Merged slide holding the predicted NP channel.
    pub merged: Option<PathBuf>,
    pub threshold: u8,
    /// Defaults to the real slide's pixel size.
    pub pixel_size_um: Option<f64>,
    pub bin_width_um: f64,
    /// Side of the square ROI grid used for the density regression.
    pub roi_size_px: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            merged: None,
            threshold: DEFAULT_THRESHOLD,
            pixel_size_um: None,
            bin_width_um: DEFAULT_BIN_WIDTH_UM,
            roi_size_px: 128,
        }
    }
}

impl RunConfig {
    /// Reads `path`, or returns defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        if !path.is_file() {
            return Err(UserError(format!("config file not found: {}", path.display())).into());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UserError(format!("invalid config {}: {e}", path.display())).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ganda_core::PixelLossMode;

    #[test]
    fn parses_sections() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            source = "vessel"
            [phantom]
            width_px = 256
            pixel_size_um = 2.0
            [train]
            epochs = 2
            pixel_loss_mode = "MSE"
            [generator]
            contracting_filters = [8, 16, 32]
            residual_filters = 32
            expansive_filters = [32, 16, 8]
            [analysis]
            roi_size_px = 64
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.phantom.width_px, 256);
        assert_eq!(cfg.source, Some(SourceMode::Vessel));
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.pixel_loss_mode, PixelLossMode::Mse);
        assert_eq!(cfg.generator.unwrap().contracting_filters, vec![8, 16, 32]);
        assert_eq!(cfg.analysis.roi_size_px, 64);
        assert_eq!(cfg.dataset, DatasetSection::default());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[phantom]\nwidth = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3").is_err());
    }

    #[test]
    fn default_channel_map_is_plane_order() {
        let map = SlideSection::default().channel_map();
        assert_eq!(map[0], (ChannelRole::Nuclei, 0));
        assert_eq!(map.len(), 3);
    }
}
