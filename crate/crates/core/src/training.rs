//! Adversarial + pixel objective and the alternating D/G optimization loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GandaError, Result};
use crate::networks::{
    Checkpoint, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Mode, NamedTensor, Param, Real,
    Tensor, TrainingMeta,
};
use crate::slide_io::{ChannelRole, SlideImage, SourceMode};
use crate::tiling::{self, normalize_value, LoadedStore, RawPatch};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PixelLossMode {
    /// Mean over the batch of the per-patch Euclidean norm of the residual.
    L2Norm,
    /// Mean squared residual over all elements.
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdvMode {
    /// `-mean(log D(G(x)))`
    NonSaturating,
    /// `mean(log(1 - D(G(x))))`
    Saturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub pixel_loss_mode: PixelLossMode,
    pub generator_adv_mode: AdvMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Feed the source channels to the discriminator alongside the NP patch.
    pub conditional_discriminator: bool,
    /// After every epoch, replace the generator's running batch-norm
    /// statistics with equal-weight averages over one pass of the training
    /// tiles under the final weights.
    pub recalibrate_batch_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 10.0,
            beta: 10.0,
            learning_rate: 2e-4,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            pixel_loss_mode: PixelLossMode::L2Norm,
            generator_adv_mode: AdvMode::NonSaturating,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            conditional_discriminator: false,
            recalibrate_batch_norm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GandaError::InvalidConfig(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam moment coefficients must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u32,
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub g_pix_loss: f64,
    pub g_total_loss: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,epoch,d_loss,g_adv,g_pix,g_total";

pub fn write_loss_log(records: &[LossRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| GandaError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| GandaError::io(path, e);
    writeln!(w, "{LOSS_LOG_HEADER}").map_err(io)?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.d_loss, r.g_adv_loss, r.g_pix_loss, r.g_total_loss
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
fn in_clamp_range(p: f64) -> bool {
    (PROB_EPS..=1.0 - PROB_EPS).contains(&p)
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    v.sum::<f64>() / n as f64
}

/// `-mean(log d_real) - mean(log(1 - d_fake))`
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    -mean(d_real.iter().map(|&p| clamp_prob(p).ln())) - mean(d_fake.iter().map(|&p| (1.0 - clamp_prob(p)).ln()))
}

fn discriminator_loss_grads(d_real: &[f64], d_fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nr = d_real.len() as f64;
    let nf = d_fake.len() as f64;
    let gr = d_real
        .iter()
        .map(|&p| if in_clamp_range(p) { -1.0 / (nr * p) } else { 0.0 })
        .collect();
    let gf = d_fake
        .iter()
        .map(|&p| if in_clamp_range(p) { 1.0 / (nf * (1.0 - p)) } else { 0.0 })
        .collect();
    (gr, gf)
}

pub fn generator_adversarial_loss(d_fake: &[f64], mode: AdvMode) -> f64 {
    match mode {
        AdvMode::NonSaturating => -mean(d_fake.iter().map(|&p| clamp_prob(p).ln())),
        AdvMode::Saturating => mean(d_fake.iter().map(|&p| (1.0 - clamp_prob(p)).ln())),
    }
}

/// d(generator adversarial loss)/d(d_fake).
pub fn generator_adversarial_grad(d_fake: &[f64], mode: AdvMode) -> Vec<f64> {
    let n = d_fake.len() as f64;
    d_fake
        .iter()
        .map(|&p| {
            if !in_clamp_range(p) {
                return 0.0;
            }
            match mode {
                AdvMode::NonSaturating => -1.0 / (n * p),
                AdvMode::Saturating => -1.0 / (n * (1.0 - p)),
            }
        })
        .collect()
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(GandaError::ShapeMismatch(format!(
            "pixel loss on {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub fn pixel_loss<T: Real>(generated: &Tensor<T>, real: &Tensor<T>, mode: PixelLossMode) -> Result<f64> {
    Ok(pixel_loss_and_grad(generated, real, mode, false)?.0)
}

/// Loss and, when requested, its gradient w.r.t. `generated`.
pub fn pixel_loss_and_grad<T: Real>(
    generated: &Tensor<T>,
    real: &Tensor<T>,
    mode: PixelLossMode,
    want_grad: bool,
) -> Result<(f64, Option<Tensor<T>>)> {
    check_same_shape(generated, real)?;
    let n = generated.batch();
    if n == 0 {
        return Ok((0.0, want_grad.then(|| Tensor::zeros(generated.shape))));
    }
    let per = generated.sample_len();
    let mut grad = want_grad.then(|| Tensor::zeros(generated.shape));
    let loss = match mode {
        PixelLossMode::L2Norm => {
            let mut total = 0.0;
            for i in 0..n {
                let (g, r) = (generated.sample(i), real.sample(i));
                let norm = g
                    .iter()
                    .zip(r)
                    .map(|(&a, &b)| (a.f64() - b.f64()).powi(2))
                    .sum::<f64>()
                    .sqrt();
                total += norm;
                if let Some(gt) = grad.as_mut() {
                    if norm > 0.0 {
                        let scale = 1.0 / (n as f64 * norm);
                        for ((d, &a), &b) in gt.sample_mut(i).iter_mut().zip(g).zip(r) {
                            *d = T::of((a.f64() - b.f64()) * scale);
                        }
                    }
                }
            }
            total / n as f64
        }
        PixelLossMode::Mse => {
            let count = (n * per) as f64;
            let sum: f64 = generated
                .data
                .iter()
                .zip(&real.data)
                .map(|(&a, &b)| (a.f64() - b.f64()).powi(2))
                .sum();
            if let Some(gt) = grad.as_mut() {
                for ((d, &a), &b) in gt.data.iter_mut().zip(&generated.data).zip(&real.data) {
                    *d = T::of(2.0 * (a.f64() - b.f64()) / count);
                }
            }
            sum / count
        }
    };
    Ok((loss, grad))
}

pub fn total_generator_loss(g_adv: f64, g_pix: f64, cfg: &TrainConfig) -> f64 {
    cfg.alpha * g_adv + cfg.beta * g_pix
}

/// Adam with bias correction. Moments are indexed by parameter order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: ADAM_EPS,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::of(self.lr * bc2.sqrt() / bc1);
        let eps = T::of(self.eps * bc2.sqrt());
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                *w = *w - step * *mi / (vi.sqrt() + eps);
            }
        }
    }

    fn export(&self, prefix: &str, params: &[&Param<T>]) -> Vec<NamedTensor> {
        if self.m.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(params.len() * 2);
        for (kind, store) in [("m", &self.m), ("v", &self.v)] {
            for (p, s) in params.iter().zip(store) {
                out.push(NamedTensor {
                    name: format!("{prefix}.{kind}.{}", p.name),
                    shape: p.shape.clone(),
                    data: s.iter().map(|v| v.f64() as f32).collect(),
                });
            }
        }
        out
    }

    fn import(&mut self, prefix: &str, params: &[&Param<T>], ckpt: &Checkpoint, t: u64) {
        let fetch = |kind: &str, p: &Param<T>| {
            ckpt.tensor(&format!("{prefix}.{kind}.{}", p.name))
                .filter(|nt| nt.data.len() == p.len())
                .map(|nt| nt.data.iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>())
        };
        let m: Option<Vec<_>> = params.iter().map(|p| fetch("m", p)).collect();
        let v: Option<Vec<_>> = params.iter().map(|p| fetch("v", p)).collect();
        if let (Some(m), Some(v)) = (m, v) {
            self.m = m;
            self.v = v;
            self.t = t;
        }
    }
}

/// Breakdown of one generator objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorObjective {
    pub adv: f64,
    pub pix: f64,
    pub total: f64,
}

fn disc_input<T: Real>(x: &Tensor<T>, np: &Tensor<T>, conditional: bool) -> Tensor<T> {
    if conditional {
        np.concat_channels(x)
    } else {
        np.clone()
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|p| p.f64()).collect()
}

/// Evaluates `alpha * adv + beta * pix` for a generator in train mode.
/// With `want_grad` the generator's parameter gradients are reset and
/// filled (the discriminator's gradients are left dirty).
pub fn generator_objective<T: Real>(
    generator: &mut Generator<T>,
    discriminator: &mut Discriminator<T>,
    x: &Tensor<T>,
    z: &Tensor<T>,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<GeneratorObjective> {
    let fake = generator.forward(x, Mode::Train)?;
    objective_from_fake(generator, discriminator, x, z, &fake, cfg, want_grad)
}

fn objective_from_fake<T: Real>(
    generator: &mut Generator<T>,
    discriminator: &mut Discriminator<T>,
    x: &Tensor<T>,
    z: &Tensor<T>,
    fake: &Tensor<T>,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<GeneratorObjective> {
    let conditional = cfg.conditional_discriminator;
    let p_fake = to_f64(&discriminator.forward(&disc_input(x, fake, conditional), Mode::Train)?);
    let adv = generator_adversarial_loss(&p_fake, cfg.generator_adv_mode);
    let (pix, dpix) = pixel_loss_and_grad(fake, z, cfg.pixel_loss_mode, want_grad)?;
    if let Some(dpix) = dpix {
        let dprob: Vec<T> = generator_adversarial_grad(&p_fake, cfg.generator_adv_mode)
            .into_iter()
            .map(T::of)
            .collect();
        let mut dfake = discriminator.backward(&dprob);
        if conditional {
            dfake = dfake.split_channels(1).0;
        }
        dfake.scale(T::of(cfg.alpha));
        let mut d = dpix;
        d.scale(T::of(cfg.beta));
        dfake.add_assign(&d);
        generator.zero_grad();
        generator.backward(&dfake);
    }
    Ok(GeneratorObjective {
        adv,
        pix,
        total: total_generator_loss(adv, pix, cfg),
    })
}

/// Networks plus optimizer state for the alternating updates.
pub struct Trainer<T> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    pub cfg: TrainConfig,
    pub step: u64,
}

/// SplitMix64 mix of a master seed and a salt.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Real> Trainer<T> {
    pub fn new(gspec: &GeneratorSpec, dspec: &DiscriminatorSpec, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let expected_d = if cfg.conditional_discriminator {
            1 + gspec.input_channels
        } else {
            1
        };
        if dspec.input_channels != expected_d {
            return Err(GandaError::InvalidSpec(format!(
                "discriminator takes {} channels, training setup provides {expected_d}",
                dspec.input_channels
            )));
        }
        Ok(Trainer {
            generator: Generator::new(gspec, cfg.seed)?,
            discriminator: Discriminator::new(dspec, derive_seed(cfg.seed, 1))?,
            opt_g: Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
            opt_d: Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
            cfg: cfg.clone(),
            step: 0,
        })
    }

    /// One discriminator update on real `z` vs detached `G(x)`, then one
    /// generator update on `alpha * adv + beta * pix`.
    pub fn train_step(&mut self, x: &Tensor<T>, z: &Tensor<T>, epoch: u32) -> Result<LossRecord> {
        let cond = self.cfg.conditional_discriminator;
        let fake = self.generator.forward(x, Mode::Train)?;

        self.discriminator.zero_grad();
        let p_real = self.discriminator.forward(&disc_input(x, z, cond), Mode::Train)?;
        let p_real = to_f64(&p_real);
        let (g_real, _) = discriminator_loss_grads(&p_real, &[]);
        self.discriminator
            .backward(&g_real.into_iter().map(T::of).collect::<Vec<_>>());
        let p_fake = to_f64(&self.discriminator.forward(&disc_input(x, &fake, cond), Mode::Train)?);
        let (_, g_fake) = discriminator_loss_grads(&[], &p_fake);
        self.discriminator
            .backward(&g_fake.into_iter().map(T::of).collect::<Vec<_>>());
        let d_loss = discriminator_loss(&p_real, &p_fake);
        self.opt_d.step(self.discriminator.params_mut());

        let obj = objective_from_fake(
            &mut self.generator,
            &mut self.discriminator,
            x,
            z,
            &fake,
            &self.cfg,
            true,
        )?;
        self.discriminator.zero_grad();

        self.step += 1;
        let rec = LossRecord {
            step: self.step,
            epoch,
            d_loss,
            g_adv_loss: obj.adv,
            g_pix_loss: obj.pix,
            g_total_loss: obj.total,
        };
        if ![rec.d_loss, rec.g_adv_loss, rec.g_pix_loss, rec.g_total_loss]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(GandaError::NonFiniteLoss {
                step: rec.step,
                detail: format!("{rec:?}; generator output finite: {}", fake.all_finite()),
            });
        }
        self.opt_g.step(self.generator.params_mut());
        Ok(rec)
    }

    pub fn checkpoint(&self, meta: TrainingMeta) -> Checkpoint {
        let mut extra = self.opt_g.export("adam.gen", &self.generator.params());
        extra.extend(self.opt_d.export("adam.disc", &self.discriminator.params()));
        Checkpoint::capture(&self.generator, &self.discriminator, extra, meta)
    }

    /// Restores networks and optimizer moments from a checkpoint written by
    /// [`Trainer::checkpoint`].
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.restore_generator(&mut self.generator)?;
        ckpt.restore_discriminator(&mut self.discriminator)?;
        self.step = ckpt.meta.step;
        let gp = self.generator.params();
        self.opt_g.import("adam.gen", &gp, ckpt, ckpt.meta.step);
        let dp = self.discriminator.params();
        self.opt_d.import("adam.disc", &dp, ckpt, ckpt.meta.step);
        Ok(())
    }
}

/// Included training tiles held in memory as 8-bit planes.
#[derive(Clone, Debug, Default)]
pub struct PatchDataset {
    pub patch_size_px: usize,
    pub patches: Vec<RawPatch>,
}

impl PatchDataset {
    pub fn from_slides(slides: &[SlideImage], patch_size_px: usize) -> Result<Self> {
        let mut patches = Vec::new();
        for s in slides {
            let (m, tiles) = tiling::decompose_filtered(s, patch_size_px)?;
            patches.extend(
                tiles
                    .into_iter()
                    .zip(&m.records)
                    .filter(|(_, r)| r.included)
                    .map(|(p, _)| p),
            );
        }
        Ok(PatchDataset {
            patch_size_px,
            patches,
        })
    }

    pub fn from_store(store: LoadedStore) -> Self {
        PatchDataset {
            patch_size_px: store.index.patch_size_px,
            patches: store.patches,
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Builds `(x, z)` tensors for the given tile indices.
    pub fn batch<T: Real>(&self, indices: &[usize], mode: SourceMode) -> Result<(Tensor<T>, Tensor<T>)> {
        let p = self.patch_size_px;
        let roles = mode.roles();
        let mut x = Vec::with_capacity(indices.len() * roles.len() * p * p);
        let mut z = Vec::with_capacity(indices.len() * p * p);
        for &i in indices {
            let patch = &self.patches[i];
            for &r in roles {
                x.extend(patch.require(r)?.as_slice().iter().map(|&v| T::of(normalize_value(v) as f64)));
            }
            z.extend(
                patch
                    .require(ChannelRole::Np)?
                    .as_slice()
                    .iter()
                    .map(|&v| T::of(normalize_value(v) as f64)),
            );
        }
        Ok((
            Tensor::from_vec([indices.len(), roles.len(), p, p], x),
            Tensor::from_vec([indices.len(), 1, p, p], z),
        ))
    }
}

/// Seeded per-epoch visiting order.
pub fn epoch_order(len: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + epoch as u64));
    idx.shuffle(&mut rng);
    idx
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// One checkpoint per completed epoch (or just the initial state when
    /// `epochs == 0`); the last is flagged final.
    pub checkpoints: Vec<Checkpoint>,
    pub losses: Vec<LossRecord>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("training emits at least one checkpoint")
    }
}

pub fn train(
    dataset: &PatchDataset,
    source_mode: SourceMode,
    gspec: &GeneratorSpec,
    dspec: &DiscriminatorSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_resumable(dataset, source_mode, gspec, dspec, cfg, None, &mut |_| Ok(()))
}

/// Full training loop. Continues from `resume` when given; `on_epoch` sees
/// every emitted checkpoint (e.g. to persist it).
pub fn train_resumable(
    dataset: &PatchDataset,
    source_mode: SourceMode,
    gspec: &GeneratorSpec,
    dspec: &DiscriminatorSpec,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    if gspec.input_channels != source_mode.channel_count() {
        return Err(GandaError::ChannelSpecMismatch {
            mode: source_mode,
            expected: source_mode.channel_count(),
            found: gspec.input_channels,
        });
    }
    if dataset.is_empty() {
        return Err(GandaError::EmptyDataset);
    }
    let mut trainer = Trainer::<f32>::new(gspec, dspec, cfg)?;
    let mut losses = Vec::new();
    let mut start_epoch = 0;
    if let Some(ckpt) = resume {
        trainer.restore(ckpt)?;
        losses = ckpt.meta.loss_history.clone();
        start_epoch = ckpt.meta.epoch;
    }
    let meta = |epoch: u32, step: u64, losses: &[LossRecord], is_final: bool| TrainingMeta {
        epoch,
        step,
        seed: cfg.seed,
        config_hash: String::new(),
        source_mode: Some(source_mode),
        train_config: Some(cfg.clone()),
        is_final,
        loss_history: losses.to_vec(),
    };
    let mut checkpoints = Vec::new();
    if start_epoch >= cfg.epochs {
        let ckpt = trainer.checkpoint(meta(start_epoch, trainer.step, &losses, true));
        on_epoch(&ckpt)?;
        checkpoints.push(ckpt);
        return Ok(TrainOutcome { checkpoints, losses });
    }
    for epoch in start_epoch..cfg.epochs {
        let order = epoch_order(dataset.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, z) = dataset.batch::<f32>(chunk, source_mode)?;
            let rec = trainer.train_step(&x, &z, epoch + 1)?;
            log::debug!(
                "epoch {} step {}: d={:.4} adv={:.4} pix={:.5}",
                epoch + 1,
                rec.step,
                rec.d_loss,
                rec.g_adv_loss,
                rec.g_pix_loss
            );
            losses.push(rec);
        }
        if cfg.recalibrate_batch_norm {
            let order = epoch_order(dataset.len(), cfg.seed, epoch);
            let batches = order
                .chunks(cfg.batch_size)
                .map(|chunk| dataset.batch::<f32>(chunk, source_mode).map(|(x, _)| x));
            trainer.generator.recalibrate_batch_norm(batches)?;
        }
        let is_final = epoch + 1 == cfg.epochs;
        let ckpt = trainer.checkpoint(meta(epoch + 1, trainer.step, &losses, is_final));
        log::info!(
            "epoch {}/{} done ({} steps)",
            epoch + 1,
            cfg.epochs,
            trainer.step
        );
        on_epoch(&ckpt)?;
        checkpoints.push(ckpt);
    }
    Ok(TrainOutcome { checkpoints, losses })
}
