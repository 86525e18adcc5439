//! Differentiable building blocks. Each layer caches what its backward pass
//! needs during `forward`; `backward` consumes an upstream gradient, adds to
//! the parameter gradients and returns the gradient w.r.t. the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, MatRef, Real, Tensor};

/// Whether batch-norm uses batch statistics (and updates running averages)
/// or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: T) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn gaussian(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        let dist = Normal::new(0.0, std).expect("valid std");
        p.value.iter_mut().for_each(|x| *x = T::of(dist.sample(rng)));
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Non-trainable state persisted with the weights (batch-norm running stats).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub const LEAKY: Activation = Activation::LeakyRelu { slope: 0.2 };

    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu { slope } => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(slope)
                }
            }
            // Written so NaN propagates instead of clamping to zero.
            Activation::Relu => {
                if x < T::zero() {
                    T::zero()
                } else {
                    x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::LeakyRelu { slope } => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::of(slope)
                }
            }
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Identity => T::one(),
        }
    }

    pub fn is_valid(self) -> bool {
        match self {
            Activation::LeakyRelu { slope } => slope > 0.0 && slope.is_finite(),
            _ => true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ActLayer<T> {
    pub kind: Activation,
    output: Option<Tensor<T>>,
}

impl<T: Real> ActLayer<T> {
    pub fn new(kind: Activation) -> Self {
        ActLayer { kind, output: None }
    }

    pub fn forward(&mut self, mut x: Tensor<T>) -> Tensor<T> {
        let kind = self.kind;
        x.data.iter_mut().for_each(|v| *v = kind.apply(*v));
        self.output = Some(x.clone());
        x
    }

    pub fn backward(&mut self, mut dy: Tensor<T>) -> Tensor<T> {
        let y = self.output.as_ref().expect("activation backward before forward");
        let kind = self.kind;
        dy.data
            .iter_mut()
            .zip(&y.data)
            .for_each(|(g, &o)| *g = *g * kind.grad_from_output(o));
        dy
    }
}

/// Geometry of a strided, zero-padded square-kernel correlation from an
/// image of `c×h×w` to an output grid of `hout×wout`.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.hout * self.wout
    }

    /// Output columns per im2col chunk, bounding scratch memory.
    fn chunk(&self) -> usize {
        ((1usize << 18) / self.rows().max(1)).clamp(1, self.cols().max(1))
    }
}

impl Geom {
    /// Output columns `[lo, hi)` of a row whose input column `ox*stride+kx-pad`
    /// lands inside the image.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kx).div_ceil(s);
        let hi = (self.w + self.pad).saturating_sub(kx).div_ceil(s).min(self.wout);
        (lo.min(hi), hi)
    }

    /// Visits output-row segments of columns `c0..c0+nc` as
    /// `(offset into chunk, oy, ox_start, ox_end)`.
    fn segments(&self, c0: usize, nc: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let mut pos = c0;
        let end = c0 + nc;
        while pos < end {
            let oy = pos / self.wout;
            let ox0 = pos % self.wout;
            let ox1 = (ox0 + end - pos).min(self.wout);
            f(pos - c0, oy, ox0, ox1);
            pos += ox1 - ox0;
        }
    }
}

/// Gathers columns `c0..c0+nc` of the patch matrix (rows = c,ky,kx).
fn im2col<T: Real>(img: &[T], g: &Geom, c0: usize, nc: usize, cols: &mut [T]) {
    let (hw, s) = (g.h * g.w, g.stride);
    for c in 0..g.c {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &mut cols[r * nc..(r + 1) * nc];
                let (vlo, vhi) = g.valid_ox(kx);
                g.segments(c0, nc, |off, oy, ox0, ox1| {
                    let seg = &mut row[off..off + ox1 - ox0];
                    let iy = (oy * s + ky).wrapping_sub(g.pad);
                    if iy >= g.h {
                        seg.fill(T::zero());
                        return;
                    }
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let (a, b) = (vlo.clamp(ox0, ox1), vhi.clamp(ox0, ox1));
                    seg[..a - ox0].fill(T::zero());
                    seg[b - ox0..].fill(T::zero());
                    if a == b {
                        return;
                    }
                    let dst = &mut seg[a - ox0..b - ox0];
                    let ix0 = a * s + kx - g.pad;
                    if s == 1 {
                        dst.copy_from_slice(&src[ix0..ix0 + dst.len()]);
                    } else {
                        dst.iter_mut().zip(src[ix0..].iter().step_by(s)).for_each(|(d, &v)| *d = v);
                    }
                });
            }
        }
    }
}

/// Scatter-adds patch-matrix columns back into the image (adjoint of im2col).
fn col2im_add<T: Real>(cols: &[T], g: &Geom, c0: usize, nc: usize, img: &mut [T]) {
    let (hw, s) = (g.h * g.w, g.stride);
    for c in 0..g.c {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &cols[r * nc..(r + 1) * nc];
                let (vlo, vhi) = g.valid_ox(kx);
                g.segments(c0, nc, |off, oy, ox0, ox1| {
                    let iy = (oy * s + ky).wrapping_sub(g.pad);
                    if iy >= g.h {
                        return;
                    }
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let (a, b) = (vlo.clamp(ox0, ox1), vhi.clamp(ox0, ox1));
                    if a == b {
                        return;
                    }
                    let src = &row[off + a - ox0..off + b - ox0];
                    let ix0 = a * s + kx - g.pad;
                    if s == 1 {
                        let d = &mut dst[ix0..ix0 + src.len()];
                        d.iter_mut().zip(src).for_each(|(p, &v)| *p = *p + v);
                    } else {
                        dst[ix0..].iter_mut().step_by(s).zip(src).for_each(|(p, &v)| *p = *p + v);
                    }
                });
            }
        }
    }
}

fn chunks(total: usize, step: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..total).step_by(step.max(1)).map(move |c0| (c0, step.min(total - c0)))
}

/// Sums per-sample gradient partials in sample order so the result does not
/// depend on thread scheduling.
fn accumulate<T: Real>(dst: &mut [T], partials: Vec<Vec<T>>) {
    for p in partials {
        dst.iter_mut().zip(p).for_each(|(d, v)| *d = *d + v);
    }
}

fn add_channel_bias<T: Real>(out: &mut Tensor<T>, bias: &[T]) {
    let hw = out.height() * out.width();
    let c = out.channels();
    out.data.chunks_mut(hw).enumerate().for_each(|(i, plane)| {
        let b = bias[i % c];
        plane.iter_mut().for_each(|v| *v = *v + b);
    });
}

fn channel_sums<T: Real>(dy: &Tensor<T>) -> Vec<T> {
    let hw = dy.height() * dy.width();
    let c = dy.channels();
    let mut sums = vec![T::zero(); c];
    dy.data.chunks(hw).enumerate().for_each(|(i, plane)| {
        sums[i % c] = sums[i % c] + plane.iter().copied().sum::<T>();
    });
    sums
}

/// Square-kernel 2D convolution (cross-correlation), weight layout
/// `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
        init_std: f64,
    ) -> Self {
        Conv2d {
            weight: Param::gaussian(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                init_std,
                rng,
            ),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), vec![out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn geom(&self, h: usize, w: usize) -> Geom {
        let (hout, wout) = self.output_size(h, w);
        Geom {
            c: self.in_channels,
            h,
            w,
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
            hout,
            wout,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let g = self.geom(x.height(), x.width());
        let (rows, cols, step) = (g.rows(), g.cols(), g.chunk());
        let cout = self.out_channels;
        let mut out = Tensor::zeros([x.batch(), cout, g.hout, g.wout]);
        let weight = &self.weight.value;
        let out_len = out.sample_len();
        out.data
            .par_chunks_mut(out_len.max(1))
            .enumerate()
            .for_each(|(i, y)| {
                let xs = x.sample(i);
                let mut buf = vec![T::zero(); rows * step];
                for (c0, nc) in chunks(cols, step) {
                    im2col(xs, &g, c0, nc, &mut buf);
                    gemm(
                        cout,
                        rows,
                        nc,
                        T::one(),
                        MatRef::new(weight, rows, 1),
                        MatRef::new(&buf[..rows * nc], nc, 1),
                        T::zero(),
                        &mut y[c0..],
                        cols,
                        1,
                    );
                }
            });
        if let Some(b) = &self.bias {
            add_channel_bias(&mut out, &b.value);
        }
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward before forward");
        let g = self.geom(x.height(), x.width());
        let (rows, cols, step) = (g.rows(), g.cols(), g.chunk());
        let cout = self.out_channels;
        assert_eq!(dy.shape, [x.batch(), cout, g.hout, g.wout], "conv grad shape");
        let mut dx = Tensor::zeros(x.shape);
        let weight = &self.weight.value;
        let wlen = weight.len();
        let x_len = x.sample_len();
        let partials: Vec<Vec<T>> = dx
            .data
            .par_chunks_mut(x_len.max(1))
            .enumerate()
            .map(|(i, dxs)| {
                let xs = x.sample(i);
                let dys = dy.sample(i);
                let mut dw = vec![T::zero(); wlen];
                let mut buf = vec![T::zero(); rows * step];
                let mut dbuf = vec![T::zero(); rows * step];
                for (c0, nc) in chunks(cols, step) {
                    im2col(xs, &g, c0, nc, &mut buf);
                    // dW += dY[:, chunk] · colsᵀ
                    gemm(
                        cout,
                        nc,
                        rows,
                        T::one(),
                        MatRef::new(&dys[c0..], cols, 1),
                        MatRef::new(&buf[..rows * nc], 1, nc),
                        T::one(),
                        &mut dw,
                        rows,
                        1,
                    );
                    // dcols = Wᵀ · dY[:, chunk]
                    gemm(
                        rows,
                        cout,
                        nc,
                        T::one(),
                        MatRef::new(weight, 1, rows),
                        MatRef::new(&dys[c0..], cols, 1),
                        T::zero(),
                        &mut dbuf[..rows * nc],
                        nc,
                        1,
                    );
                    col2im_add(&dbuf[..rows * nc], &g, c0, nc, dxs);
                }
                dw
            })
            .collect();
        accumulate(&mut self.weight.grad, partials);
        if let Some(b) = &mut self.bias {
            let sums = channel_sums(dy);
            b.grad.iter_mut().zip(sums).for_each(|(g, s)| *g = *g + s);
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

/// Transposed convolution (adjoint of [`Conv2d`] w.r.t. its input), weight
/// layout `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        bias: bool,
        rng: &mut impl Rng,
        init_std: f64,
    ) -> Self {
        ConvTranspose2d {
            weight: Param::gaussian(
                format!("{name}.weight"),
                vec![in_channels, out_channels, kernel, kernel],
                init_std,
                rng,
            ),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), vec![out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            output_padding,
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n - 1) * self.stride + self.kernel + self.output_padding - 2 * self.pad;
        (f(h), f(w))
    }

    fn geom(&self, h: usize, w: usize) -> Geom {
        let (hb, wb) = self.output_size(h, w);
        let g = Geom {
            c: self.out_channels,
            h: hb,
            w: wb,
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
            hout: h,
            wout: w,
        };
        debug_assert_eq!((hb + 2 * self.pad - self.kernel) / self.stride + 1, h);
        g
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "transposed conv input channels");
        let g = self.geom(x.height(), x.width());
        let (rows, cols, step) = (g.rows(), g.cols(), g.chunk());
        let cin = self.in_channels;
        let mut out = Tensor::zeros([x.batch(), self.out_channels, g.h, g.w]);
        let weight = &self.weight.value;
        let out_len = out.sample_len();
        out.data
            .par_chunks_mut(out_len.max(1))
            .enumerate()
            .for_each(|(i, y)| {
                let xs = x.sample(i);
                let mut buf = vec![T::zero(); rows * step];
                for (c0, nc) in chunks(cols, step) {
                    // cols = Wᵀ · X[:, chunk]
                    gemm(
                        rows,
                        cin,
                        nc,
                        T::one(),
                        MatRef::new(weight, 1, rows),
                        MatRef::new(&xs[c0..], cols, 1),
                        T::zero(),
                        &mut buf[..rows * nc],
                        nc,
                        1,
                    );
                    col2im_add(&buf[..rows * nc], &g, c0, nc, y);
                }
            });
        if let Some(b) = &self.bias {
            add_channel_bias(&mut out, &b.value);
        }
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("transposed conv backward before forward");
        let g = self.geom(x.height(), x.width());
        let (rows, cols, step) = (g.rows(), g.cols(), g.chunk());
        let cin = self.in_channels;
        assert_eq!(dy.shape, [x.batch(), self.out_channels, g.h, g.w], "transposed conv grad shape");
        let mut dx = Tensor::zeros(x.shape);
        let weight = &self.weight.value;
        let wlen = weight.len();
        let x_len = x.sample_len();
        let partials: Vec<Vec<T>> = dx
            .data
            .par_chunks_mut(x_len.max(1))
            .enumerate()
            .map(|(i, dxs)| {
                let xs = x.sample(i);
                let dys = dy.sample(i);
                let mut dw = vec![T::zero(); wlen];
                let mut dbuf = vec![T::zero(); rows * step];
                for (c0, nc) in chunks(cols, step) {
                    im2col(dys, &g, c0, nc, &mut dbuf);
                    let dcols = &dbuf[..rows * nc];
                    // dX[:, chunk] = W · dcols
                    gemm(
                        cin,
                        rows,
                        nc,
                        T::one(),
                        MatRef::new(weight, rows, 1),
                        MatRef::new(dcols, nc, 1),
                        T::zero(),
                        &mut dxs[c0..],
                        cols,
                        1,
                    );
                    // dW += X[:, chunk] · dcolsᵀ
                    gemm(
                        cin,
                        nc,
                        rows,
                        T::one(),
                        MatRef::new(&xs[c0..], cols, 1),
                        MatRef::new(dcols, 1, nc),
                        T::one(),
                        &mut dw,
                        rows,
                        1,
                    );
                }
                dw
            })
            .collect();
        accumulate(&mut self.weight.grad, partials);
        if let Some(b) = &mut self.bias {
            let sums = channel_sums(dy);
            b.grad.iter_mut().zip(sums).for_each(|(g, s)| *g = *g + s);
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-3;

/// Per-channel batch normalization over (N, H, W).
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    /// Number of training batches folded into the running statistics.
    pub batches_seen: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], T::one()),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![T::zero(); channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![T::one(); channels],
            },
            batches_seen: Buffer {
                name: format!("{name}.batches_seen"),
                value: vec![T::zero()],
            },
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            cache: None,
        }
    }

    pub fn forward(&mut self, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let plane = &x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                        mean[ch] += plane.iter().map(|v| v.f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for i in 0..n {
                    for ch in 0..c {
                        let plane = &x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                        var[ch] += plane.iter().map(|v| (v.f64() - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                // Cumulative average until it reaches `momentum`, so the
                // initial 0/1 statistics do not linger.
                let t = self.batches_seen.value[0].f64();
                let mo = self.momentum.min(t / (t + 1.0));
                self.batches_seen.value[0] = T::of(t + 1.0);
                for ch in 0..c {
                    let rm = &mut self.running_mean.value[ch];
                    *rm = T::of(mo * rm.f64() + (1.0 - mo) * mean[ch]);
                    let rv = &mut self.running_var.value[ch];
                    *rv = T::of(mo * rv.f64() + (1.0 - mo) * var[ch]);
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.value.iter().map(|v| v.f64()).collect(),
                self.running_var.value.iter().map(|v| v.f64()).collect(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + self.eps).sqrt())).collect();
        let mean: Vec<T> = mean.into_iter().map(T::of).collect();
        let mut xhat = x.clone();
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], self.gamma.value[ch], self.beta.value[ch]);
                for (xh, y) in xhat.data[range.clone()].iter_mut().zip(&mut x.data[range]) {
                    *xh = (*xh - mu) * is;
                    *y = g * *xh + b;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train: mode == Mode::Train,
        });
        x
    }

    pub fn backward(&mut self, mut dy: Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("batch-norm backward before forward");
        let [n, c, h, w] = dy.shape;
        let hw = h * w;
        let m = T::of((n * hw) as f64);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (&g, &xh) in dy.data[range.clone()].iter().zip(&cache.xhat.data[range]) {
                    sum_dy[ch] = sum_dy[ch] + g;
                    sum_dy_xhat[ch] = sum_dy_xhat[ch] + g * xh;
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] = self.gamma.grad[ch] + sum_dy_xhat[ch];
            self.beta.grad[ch] = self.beta.grad[ch] + sum_dy[ch];
        }
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let scale = self.gamma.value[ch] * cache.inv_std[ch];
                if cache.train {
                    let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                    for (g, &xh) in dy.data[range.clone()].iter_mut().zip(&cache.xhat.data[range]) {
                        *g = scale * (*g - sd / m - xh * sdx / m);
                    }
                } else {
                    dy.data[range].iter_mut().for_each(|g| *g = *g * scale);
                }
            }
        }
        dy
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var, &self.batches_seen]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        vec![&mut self.running_mean, &mut self.running_var, &mut self.batches_seen]
    }
}

/// Fully-connected layer over the flattened per-sample input.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng, init_std: f64) -> Self {
        Linear {
            weight: Param::gaussian(format!("{name}.weight"), vec![out_features, in_features], init_std, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![out_features]),
            in_features,
            out_features,
            input: None,
        }
    }

    /// Returns `[N, out, 1, 1]`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.sample_len(), self.in_features, "linear input features");
        let n = x.batch();
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        // Y (n×out) = X (n×in) · Wᵀ
        gemm(
            n,
            self.in_features,
            self.out_features,
            T::one(),
            MatRef::new(&x.data, self.in_features, 1),
            MatRef::new(&self.weight.value, 1, self.in_features),
            T::zero(),
            &mut out.data,
            self.out_features,
            1,
        );
        for row in out.data.chunks_mut(self.out_features) {
            row.iter_mut().zip(&self.bias.value).for_each(|(y, &b)| *y = *y + b);
        }
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("linear backward before forward");
        let n = x.batch();
        let mut dx = Tensor::zeros(x.shape);
        // dX = dY · W
        gemm(
            n,
            self.out_features,
            self.in_features,
            T::one(),
            MatRef::new(&dy.data, self.out_features, 1),
            MatRef::new(&self.weight.value, self.in_features, 1),
            T::zero(),
            &mut dx.data,
            self.in_features,
            1,
        );
        // dW += dYᵀ · X
        gemm(
            self.out_features,
            n,
            self.in_features,
            T::one(),
            MatRef::new(&dy.data, 1, self.out_features),
            MatRef::new(&x.data, self.in_features, 1),
            T::one(),
            &mut self.weight.grad,
            self.in_features,
            1,
        );
        for row in dy.data.chunks(self.out_features) {
            self.bias.grad.iter_mut().zip(row).for_each(|(g, &v)| *g = *g + v);
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}
