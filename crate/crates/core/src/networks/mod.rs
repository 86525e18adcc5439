//! Generator and discriminator networks, their declarative specs, and
//! checkpoint persistence. The engine is a small hand-written CNN stack
//! (conv, transposed conv, batch-norm, dense) with explicit backward passes,
//! generic over `f32`/`f64`.

mod checkpoint;
mod discriminator;
mod generator;
pub mod layers;
mod tensor;

use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, TrainingMeta};
pub use discriminator::Discriminator;
pub use generator::Generator;
pub use layers::{Activation, Mode, Param};
pub use tensor::{Real, Tensor};

use crate::error::{GandaError, Result};

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub input_channels: usize,
    pub contracting_filters: Vec<usize>,
    pub residual_blocks: usize,
    pub residual_filters: usize,
    pub expansive_filters: Vec<usize>,
    pub boundary_kernel_px: usize,
    pub inner_kernel_px: usize,
    pub stride: usize,
    pub skip_connections: bool,
    pub contracting_activation: Activation,
    pub expansive_activation: Activation,
    pub init_std: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            input_channels: 2,
            contracting_filters: vec![32, 64, 128],
            residual_blocks: 3,
            residual_filters: 128,
            expansive_filters: vec![128, 64, 32],
            boundary_kernel_px: 7,
            inner_kernel_px: 3,
            stride: 2,
            skip_connections: true,
            contracting_activation: Activation::LEAKY,
            expansive_activation: Activation::Relu,
            init_std: DEFAULT_INIT_STD,
        }
    }
}

impl GeneratorSpec {
    /// Same topology with a different filter ladder, e.g. `[8, 16, 32]`.
    pub fn scaled(input_channels: usize, contracting_filters: &[usize]) -> Self {
        let last = contracting_filters.last().copied().unwrap_or(0);
        GeneratorSpec {
            input_channels,
            contracting_filters: contracting_filters.to_vec(),
            residual_filters: last,
            expansive_filters: contracting_filters.iter().rev().copied().collect(),
            ..GeneratorSpec::default()
        }
    }

    /// Channels concatenated onto the output of expansive stage `j`.
    pub fn skip_channels(&self, j: usize) -> usize {
        let n = self.contracting_filters.len();
        if self.skip_connections && j + 1 < n {
            self.contracting_filters[n - 2 - j]
        } else {
            0
        }
    }

    /// Input side length must be a multiple of this.
    pub fn size_divisor(&self) -> usize {
        self.stride.pow(self.contracting_filters.len() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GandaError::InvalidSpec(m));
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if self.contracting_filters.is_empty() {
            return bad("contracting path needs at least one stage".into());
        }
        let all = self
            .contracting_filters
            .iter()
            .chain(&self.expansive_filters)
            .chain(std::iter::once(&self.residual_filters));
        if all.clone().any(|&f| f == 0) {
            return bad("filter counts must be positive".into());
        }
        let mirrored: Vec<usize> = self.contracting_filters.iter().rev().copied().collect();
        if self.expansive_filters != mirrored {
            return bad(format!(
                "expansive filters {:?} do not mirror contracting filters {:?}",
                self.expansive_filters, self.contracting_filters
            ));
        }
        if Some(&self.residual_filters) != self.contracting_filters.last() {
            return bad("residual filters must equal the last contracting stage for identity skips".into());
        }
        for k in [self.boundary_kernel_px, self.inner_kernel_px] {
            if k % 2 == 0 {
                return bad(format!("kernel size {k} must be odd"));
            }
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if !(self.contracting_activation.is_valid() && self.expansive_activation.is_valid()) {
            return bad("invalid activation parameters".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSpec {
    /// 1 for the unconditional (NP-only) form; 1 + source channels when
    /// conditioned on the source patch.
    pub input_channels: usize,
    pub conv_filters: Vec<usize>,
    pub kernel_px: usize,
    pub stride: usize,
    pub input_size_px: usize,
    pub activation: Activation,
    pub init_std: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            input_channels: 1,
            conv_filters: vec![16, 32, 64, 128, 256, 512],
            kernel_px: 4,
            stride: 2,
            input_size_px: 512,
            activation: Activation::LEAKY,
            init_std: DEFAULT_INIT_STD,
        }
    }
}

impl DiscriminatorSpec {
    pub fn scaled(input_size_px: usize, conv_filters: &[usize]) -> Self {
        DiscriminatorSpec {
            conv_filters: conv_filters.to_vec(),
            input_size_px,
            ..DiscriminatorSpec::default()
        }
    }

    /// Side length of the last feature map.
    pub fn final_size(&self) -> usize {
        self.input_size_px / self.stride.pow(self.conv_filters.len() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GandaError::InvalidSpec(m));
        if self.input_channels == 0 || self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return bad("discriminator needs positive channel and filter counts".into());
        }
        if self.stride == 0 || self.kernel_px < self.stride || (self.kernel_px - self.stride) % 2 != 0 {
            return bad(format!(
                "kernel {} and stride {} must differ by an even amount",
                self.kernel_px, self.stride
            ));
        }
        let div = self.stride.pow(self.conv_filters.len() as u32);
        if self.input_size_px == 0 || self.input_size_px % div != 0 {
            return bad(format!(
                "input size {} is not a multiple of {div}",
                self.input_size_px
            ));
        }
        if !self.activation.is_valid() || !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("invalid activation or init parameters".into());
        }
        Ok(())
    }
}

/// Builds a generator with weights drawn from `seed`.
pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<Generator<f32>> {
    Generator::new(spec, seed)
}

/// Builds a discriminator with weights drawn from `seed`.
pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64) -> Result<Discriminator<f32>> {
    Discriminator::new(spec, seed)
}
