//! GAN-based prediction of nanoparticle distributions in tumor sections from
//! nuclei and vessel fluorescence channels.
//!
//! Pipeline: [`slide_io`] loads multi-channel slides, [`tiling`] cuts them into
//! normalized patches, [`training`] fits a U-Net generator against a
//! convolutional discriminator ([`networks`]), [`inference`] reassembles
//! whole-slide predictions, and [`analysis`] computes densities, regression
//! and vessel-distance statistics. [`phantom`] synthesizes slides with a known
//! forward model for testing.

pub mod analysis;
pub mod error;
pub mod inference;
pub mod networks;
pub mod phantom;
pub mod raster;
pub mod slide_io;
pub mod tiling;
pub mod training;

pub use analysis::{AnalysisConfig, AnalysisReport, DistanceStats, RegressionResult, Roi};
pub use error::{GandaError, Result};
pub use inference::PredictionResult;
pub use networks::{Checkpoint, DiscriminatorSpec, GeneratorSpec};
pub use phantom::{GroundTruth, PhantomParams};
pub use raster::{Mask, Plane, Raster};
pub use slide_io::{ChannelPlane, ChannelRole, SlideImage, SourceMode};
pub use tiling::{PatchManifest, PatchRecord, RawPatch, TensorPatch};
pub use training::{LossRecord, PixelLossMode, TrainConfig};
