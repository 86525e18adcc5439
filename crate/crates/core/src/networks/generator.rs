use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{ActLayer, Activation, BatchNorm2d, Buffer, Conv2d, ConvTranspose2d, Mode, Param};
use super::tensor::{Real, Tensor};
use super::GeneratorSpec;
use crate::error::{GandaError, Result};

/// conv → batch-norm → activation
#[derive(Clone, Debug)]
struct DownBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    act: ActLayer<T>,
}

/// `x + act(bn(conv(x)))`
#[derive(Clone, Debug)]
pub(crate) struct ResBlock<T> {
    pub(crate) conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    act: ActLayer<T>,
}

/// transposed conv → batch-norm → activation
#[derive(Clone, Debug)]
struct UpBlock<T> {
    conv: ConvTranspose2d<T>,
    bn: BatchNorm2d<T>,
    act: ActLayer<T>,
}

/// U-Net generator: stride-2 contracting path, residual mid-path, stride-2
/// transposed-conv expansive path with concatenating skips, and a tanh head.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    down: Vec<DownBlock<T>>,
    pub(crate) res: Vec<ResBlock<T>>,
    up: Vec<UpBlock<T>>,
    head: Conv2d<T>,
    head_act: ActLayer<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = spec.init_std;
        let s = spec.stride;
        let n = spec.contracting_filters.len();

        let mut down = Vec::with_capacity(n);
        let mut cin = spec.input_channels;
        for (i, &f) in spec.contracting_filters.iter().enumerate() {
            let k = if i == 0 { spec.boundary_kernel_px } else { spec.inner_kernel_px };
            let name = format!("gen.down{i}");
            down.push(DownBlock {
                conv: Conv2d::new(&format!("{name}.conv"), cin, f, k, s, k / 2, false, &mut rng, std),
                bn: BatchNorm2d::new(&format!("{name}.bn"), f),
                act: ActLayer::new(spec.contracting_activation),
            });
            cin = f;
        }

        let rf = spec.residual_filters;
        let k = spec.inner_kernel_px;
        let res = (0..spec.residual_blocks)
            .map(|i| {
                let name = format!("gen.res{i}");
                ResBlock {
                    conv: Conv2d::new(&format!("{name}.conv"), rf, rf, k, 1, k / 2, false, &mut rng, std),
                    bn: BatchNorm2d::new(&format!("{name}.bn"), rf),
                    act: ActLayer::new(spec.expansive_activation),
                }
            })
            .collect();

        let mut up = Vec::with_capacity(n);
        let mut cin = rf;
        for (j, &f) in spec.expansive_filters.iter().enumerate() {
            let name = format!("gen.up{j}");
            up.push(UpBlock {
                conv: ConvTranspose2d::new(
                    &format!("{name}.conv"),
                    cin,
                    f,
                    k,
                    s,
                    k / 2,
                    s - 1,
                    false,
                    &mut rng,
                    std,
                ),
                bn: BatchNorm2d::new(&format!("{name}.bn"), f),
                act: ActLayer::new(spec.expansive_activation),
            });
            cin = f + spec.skip_channels(j);
        }

        let kb = spec.boundary_kernel_px;
        let head = Conv2d::new("gen.head", cin, 1, kb, 1, kb / 2, true, &mut rng, std);
        Ok(Generator {
            spec: spec.clone(),
            down,
            res,
            up,
            head,
            head_act: ActLayer::new(Activation::Tanh),
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let div = self.spec.stride.pow(self.spec.contracting_filters.len() as u32);
        if x.channels() != self.spec.input_channels {
            return Err(GandaError::ShapeMismatch(format!(
                "generator expects {} input channels, got {}",
                self.spec.input_channels,
                x.channels()
            )));
        }
        if x.height() == 0 || x.height() % div != 0 || x.width() % div != 0 {
            return Err(GandaError::ShapeMismatch(format!(
                "generator input {}x{} is not a multiple of {div}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Maps `[N, C_in, H, W]` to `[N, 1, H, W]` in [-1, 1].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x, mode).0)
    }

    /// Forward pass that also returns the spatial size after each
    /// contracting stage.
    pub fn forward_traced(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<(usize, usize)>)> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x, mode))
    }

    fn forward_unchecked(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Vec<(usize, usize)>) {
        let n = self.down.len();
        let mut feats: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut sizes = Vec::with_capacity(n);
        let mut h = x.clone();
        for blk in &mut self.down {
            h = blk.act.forward(blk.bn.forward(blk.conv.forward(&h), mode));
            sizes.push((h.height(), h.width()));
            feats.push(h.clone());
        }
        for blk in &mut self.res {
            let branch = blk.act.forward(blk.bn.forward(blk.conv.forward(&h), mode));
            h.add_assign(&branch);
        }
        for j in 0..self.up.len() {
            let blk = &mut self.up[j];
            h = blk.act.forward(blk.bn.forward(blk.conv.forward(&h), mode));
            if self.spec.skip_channels(j) > 0 {
                h = h.concat_channels(&feats[n - 2 - j]);
            }
        }
        (self.head_act.forward(self.head.forward(&h)), sizes)
    }

    /// Back-propagates `dout` (gradient w.r.t. the last forward output),
    /// accumulating parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, dout: &Tensor<T>) -> Tensor<T> {
        let n = self.down.len();
        let mut dh = self.head.backward(&self.head_act.backward(dout.clone()));
        let mut dskip: Vec<Option<Tensor<T>>> = vec![None; n];
        for j in (0..self.up.len()).rev() {
            let skip = self.spec.skip_channels(j);
            if skip > 0 {
                let own = dh.channels() - skip;
                let (d_up, d_skip) = dh.split_channels(own);
                dskip[n - 2 - j] = Some(d_skip);
                dh = d_up;
            }
            let blk = &mut self.up[j];
            dh = blk.conv.backward(&blk.bn.backward(blk.act.backward(dh)));
        }
        for blk in self.res.iter_mut().rev() {
            let d_branch = blk.conv.backward(&blk.bn.backward(blk.act.backward(dh.clone())));
            dh.add_assign(&d_branch);
        }
        for i in (0..n).rev() {
            if let Some(ds) = dskip[i].take() {
                dh.add_assign(&ds);
            }
            let blk = &mut self.down[i];
            dh = blk.conv.backward(&blk.bn.backward(blk.act.backward(dh)));
        }
        dh
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for b in &mut self.down {
            v.extend(b.conv.params_mut());
            v.extend(b.bn.params_mut());
        }
        for b in &mut self.res {
            v.extend(b.conv.params_mut());
            v.extend(b.bn.params_mut());
        }
        for b in &mut self.up {
            v.extend(b.conv.params_mut());
            v.extend(b.bn.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for b in &self.down {
            v.extend(b.conv.params());
            v.extend(b.bn.params());
        }
        for b in &self.res {
            v.extend(b.conv.params());
            v.extend(b.bn.params());
        }
        for b in &self.up {
            v.extend(b.conv.params());
            v.extend(b.bn.params());
        }
        v.extend(self.head.params());
        v
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut v = Vec::new();
        v.extend(self.down.iter().flat_map(|b| b.bn.buffers()));
        v.extend(self.res.iter().flat_map(|b| b.bn.buffers()));
        v.extend(self.up.iter().flat_map(|b| b.bn.buffers()));
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut v = Vec::new();
        v.extend(self.down.iter_mut().flat_map(|b| b.bn.buffers_mut()));
        v.extend(self.res.iter_mut().flat_map(|b| b.bn.buffers_mut()));
        v.extend(self.up.iter_mut().flat_map(|b| b.bn.buffers_mut()));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Re-estimates every batch-norm's running statistics as the plain
    /// average of per-batch statistics over `batches`, weights unchanged.
    pub fn recalibrate_batch_norm<I>(&mut self, batches: I) -> Result<()>
    where
        I: IntoIterator<Item = Result<Tensor<T>>>,
    {
        let saved: Vec<f64> = self.bn_layers_mut().iter().map(|bn| bn.momentum).collect();
        for bn in self.bn_layers_mut() {
            bn.momentum = 1.0;
            bn.batches_seen.value[0] = T::zero();
        }
        let mut outcome = Ok(());
        for x in batches {
            match x.and_then(|x| self.check_input(&x).map(|_| x)) {
                Ok(x) => {
                    self.forward_unchecked(&x, Mode::Train);
                }
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        for (bn, m) in self.bn_layers_mut().into_iter().zip(saved) {
            bn.momentum = m;
        }
        outcome
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v: Vec<&mut BatchNorm2d<T>> = Vec::new();
        v.extend(self.down.iter_mut().map(|b| &mut b.bn));
        v.extend(self.res.iter_mut().map(|b| &mut b.bn));
        v.extend(self.up.iter_mut().map(|b| &mut b.bn));
        v
    }

    /// Zeroes the convolution weights of residual block `i`.
    pub fn zero_residual_weights(&mut self, i: usize) {
        self.res[i].conv.weight.value.iter_mut().for_each(|w| *w = T::zero());
    }

    /// Runs only the residual mid-path on a feature tensor.
    pub fn residual_path(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut h = x.clone();
        for blk in &mut self.res {
            let branch = blk.act.forward(blk.bn.forward(blk.conv.forward(&h), mode));
            h.add_assign(&branch);
        }
        h
    }
}
