use ganda_core::networks::{Checkpoint, Tensor};
use ganda_core::phantom::{dataset_params, generate_phantom};
use ganda_core::training::{train, train_resumable, write_loss_log, PatchDataset, Trainer, LOSS_LOG_HEADER};
use ganda_core::{
    DiscriminatorSpec, GandaError, GeneratorSpec, PhantomParams, PixelLossMode, SourceMode, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(seed: u64, n: usize, c: usize, s: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Tensor<f32> = Tensor::from_vec([n, c, s, s], (0..n * c * s * s).map(|_| rng.random_range(-1.0..1.0)).collect());
    // Target is a smooth function of the input so it is learnable.
    let z = Tensor::from_vec([n, 1, s, s], x.data.chunks(c).map(|v| (v[0] * 0.8).tanh()).collect());
    (x, z)
}

fn tiny_dataset() -> PatchDataset {
    let params = PhantomParams {
        width_px: 64,
        height_px: 64,
        vessel_segment_count: 3,
        nuclei_count: 20,
        seed: 21,
        ..PhantomParams::default()
    };
    let slides: Vec<_> = dataset_params(2, &params)
        .iter()
        .map(|p| generate_phantom(p).unwrap().0)
        .collect();
    PatchDataset::from_slides(&slides, 16).unwrap()
}

fn tiny_specs(mode: SourceMode) -> (GeneratorSpec, DiscriminatorSpec) {
    (
        GeneratorSpec::scaled(mode.channel_count(), &[4, 8]),
        DiscriminatorSpec::scaled(16, &[4, 8]),
    )
}

#[test]
fn pixel_term_alone_descends() {
    let gspec = GeneratorSpec::scaled(1, &[4, 8]);
    let dspec = DiscriminatorSpec::scaled(16, &[4, 8]);
    let cfg = TrainConfig {
        alpha: 0.0,
        learning_rate: 2e-3,
        pixel_loss_mode: PixelLossMode::Mse,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(&gspec, &dspec, &cfg).unwrap();
    let (x, z) = random_batch(1, 4, 1, 16);
    let losses: Vec<f64> = (0..50).map(|i| trainer.train_step(&x, &z, i / 10 + 1).unwrap().g_pix_loss).collect();
    let (first, last) = (losses[0], losses[49]);
    assert!(last < 0.5 * first, "pixel loss {first} -> {last}");
}

#[test]
fn logged_total_is_weighted_sum_in_both_modes() {
    for mode in [PixelLossMode::L2Norm, PixelLossMode::Mse] {
        let cfg = TrainConfig {
            alpha: 3.0,
            beta: 7.0,
            pixel_loss_mode: mode,
            ..TrainConfig::default()
        };
        let (gspec, dspec) = tiny_specs(SourceMode::Both);
        let mut trainer = Trainer::<f32>::new(&gspec, &dspec, &cfg).unwrap();
        for i in 0..3 {
            let (x, z) = random_batch(10 + i, 2, 2, 16);
            let r = trainer.train_step(&x, &z, 1).unwrap();
            let expect = 3.0 * r.g_adv_loss + 7.0 * r.g_pix_loss;
            assert!((r.g_total_loss - expect).abs() <= 1e-12 * expect.abs(), "{mode:?}: {r:?}");
        }
    }
}

#[test]
fn non_finite_input_is_reported() {
    let (gspec, dspec) = tiny_specs(SourceMode::Vessel);
    let mut trainer = Trainer::<f32>::new(&gspec, &dspec, &TrainConfig::default()).unwrap();
    let (mut x, z) = random_batch(2, 2, 1, 16);
    x.data[5] = f32::NAN;
    assert!(matches!(
        trainer.train_step(&x, &z, 1),
        Err(GandaError::NonFiniteLoss { .. })
    ));
}

#[test]
fn training_is_reproducible_and_emits_one_checkpoint_per_epoch() {
    let data = tiny_dataset();
    let (gspec, dspec) = tiny_specs(SourceMode::Both);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = train(&data, SourceMode::Both, &gspec, &dspec, &cfg).unwrap();
    let b = train(&data, SourceMode::Both, &gspec, &dspec, &cfg).unwrap();
    assert_eq!(a.checkpoints.len(), 2);
    assert!(a.final_checkpoint().meta.is_final && !a.checkpoints[0].meta.is_final);
    assert_eq!(
        a.final_checkpoint().to_bytes().unwrap(),
        b.final_checkpoint().to_bytes().unwrap()
    );
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    assert_eq!(a.losses.len() as u64, 2 * steps_per_epoch);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = tiny_dataset();
    let (gspec, dspec) = tiny_specs(SourceMode::Vessel);
    let full_cfg = TrainConfig {
        epochs: 3,
        seed: 8,
        recalibrate_batch_norm: true,
        ..TrainConfig::default()
    };
    let full = train(&data, SourceMode::Vessel, &gspec, &dspec, &full_cfg).unwrap();

    // Interrupt after the first epoch, persist, reload, continue.
    let first = train(
        &data,
        SourceMode::Vessel,
        &gspec,
        &dspec,
        &TrainConfig { epochs: 1, ..full_cfg.clone() },
    )
    .unwrap();
    let saved = Checkpoint::from_bytes(&first.final_checkpoint().to_bytes().unwrap()).unwrap();
    let mut seen = Vec::new();
    let resumed = train_resumable(
        &data,
        SourceMode::Vessel,
        &gspec,
        &dspec,
        &full_cfg,
        Some(&saved),
        &mut |c| {
            seen.push(c.meta.epoch);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(seen, vec![2, 3]);
    assert_eq!(resumed.losses, full.losses);
    assert_eq!(
        resumed.final_checkpoint().to_bytes().unwrap(),
        full.final_checkpoint().to_bytes().unwrap()
    );
}

#[test]
fn training_guards() {
    let (gspec, dspec) = tiny_specs(SourceMode::Both);
    let cfg = TrainConfig::default();
    let empty = PatchDataset {
        patch_size_px: 16,
        patches: Vec::new(),
    };
    assert!(matches!(
        train(&empty, SourceMode::Both, &gspec, &dspec, &cfg),
        Err(GandaError::EmptyDataset)
    ));
    assert!(matches!(
        train(&tiny_dataset(), SourceMode::Nuclei, &gspec, &dspec, &cfg),
        Err(GandaError::ChannelSpecMismatch { .. })
    ));
    let bad = TrainConfig {
        batch_size: 0,
        ..cfg
    };
    assert!(matches!(
        Trainer::<f32>::new(&gspec, &dspec, &bad),
        Err(GandaError::InvalidConfig(_))
    ));
}

#[test]
fn loss_log_has_documented_header() {
    let (gspec, dspec) = tiny_specs(SourceMode::Both);
    let out = train(
        &tiny_dataset(),
        SourceMode::Both,
        &gspec,
        &dspec,
        &TrainConfig { epochs: 1, ..TrainConfig::default() },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_log(&out.losses, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOSS_LOG_HEADER));
    assert_eq!(LOSS_LOG_HEADER, "step,epoch,d_loss,g_adv,g_pix,g_total");
    assert_eq!(lines.count(), out.losses.len());
}
