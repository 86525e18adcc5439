use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{ActLayer, Activation, BatchNorm2d, Buffer, Conv2d, Linear, Mode, Param};
use super::tensor::{Real, Tensor};
use super::DiscriminatorSpec;
use crate::error::{GandaError, Result};

#[derive(Clone, Debug)]
struct DiscBlock<T> {
    conv: Conv2d<T>,
    bn: Option<BatchNorm2d<T>>,
    act: ActLayer<T>,
}

/// Stride-2 convolutional classifier ending in a single sigmoid unit.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    blocks: Vec<DiscBlock<T>>,
    fc: Linear<T>,
    out_act: ActLayer<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(spec: &DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, s) = (spec.kernel_px, spec.stride);
        let pad = (k - s) / 2;
        let mut cin = spec.input_channels;
        let mut blocks = Vec::with_capacity(spec.conv_filters.len());
        for (i, &f) in spec.conv_filters.iter().enumerate() {
            let name = format!("disc.conv{i}");
            blocks.push(DiscBlock {
                conv: Conv2d::new(&format!("{name}.conv"), cin, f, k, s, pad, i == 0, &mut rng, spec.init_std),
                bn: (i > 0).then(|| BatchNorm2d::new(&format!("{name}.bn"), f)),
                act: ActLayer::new(spec.activation),
            });
            cin = f;
        }
        let side = spec.final_size();
        let fc = Linear::new("disc.fc", cin * side * side, 1, &mut rng, spec.init_std);
        Ok(Discriminator {
            spec: spec.clone(),
            blocks,
            fc,
            out_act: ActLayer::new(Activation::Sigmoid),
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.spec.input_size_px;
        if x.channels() != self.spec.input_channels || x.height() != s || x.width() != s {
            return Err(GandaError::ShapeMismatch(format!(
                "discriminator expects [N, {}, {s}, {s}], got {:?}",
                self.spec.input_channels, x.shape
            )));
        }
        Ok(())
    }

    /// One probability in (0, 1) per batch element.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        Ok(self.forward_traced(x, mode)?.0)
    }

    /// Also reports the spatial size after each convolution.
    pub fn forward_traced(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Vec<T>, Vec<usize>)> {
        self.check_input(x)?;
        let mut sizes = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for blk in &mut self.blocks {
            h = blk.conv.forward(&h);
            if let Some(bn) = &mut blk.bn {
                h = bn.forward(h, mode);
            }
            h = blk.act.forward(h);
            sizes.push(h.height());
        }
        let out = self.out_act.forward(self.fc.forward(&h));
        Ok((out.data, sizes))
    }

    /// Gradient w.r.t. the input given dLoss/dProbability per element.
    pub fn backward(&mut self, dprob: &[T]) -> Tensor<T> {
        let g = Tensor::from_vec([dprob.len(), 1, 1, 1], dprob.to_vec());
        let mut dh = self.fc.backward(&self.out_act.backward(g));
        for blk in self.blocks.iter_mut().rev() {
            dh = blk.act.backward(dh);
            if let Some(bn) = &mut blk.bn {
                dh = bn.backward(dh);
            }
            dh = blk.conv.backward(&dh);
        }
        dh
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend(b.conv.params_mut());
            if let Some(bn) = &mut b.bn {
                v.extend(bn.params_mut());
            }
        }
        v.extend(self.fc.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend(b.conv.params());
            if let Some(bn) = &b.bn {
                v.extend(bn.params());
            }
        }
        v.extend(self.fc.params());
        v
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        self.blocks
            .iter()
            .filter_map(|b| b.bn.as_ref())
            .flat_map(|bn| bn.buffers())
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.blocks
            .iter_mut()
            .filter_map(|b| b.bn.as_mut())
            .flat_map(|bn| bn.buffers_mut())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }
}
