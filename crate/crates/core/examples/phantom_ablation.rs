//! Scaled source-channel ablation on synthetic slides.
//!
//! ```text
//! cargo run --release -p ganda-core --example phantom_ablation -- [epochs] [modes] [seed]
//! ```
//!
//! `modes` is a comma list such as `nuclei,vessel,both`.

use std::time::Instant;

use ganda_core::analysis::{compare_report, AnalysisConfig, Roi};
use ganda_core::inference::{merge_channels, predict_slide};
use ganda_core::networks::{DiscriminatorSpec, GeneratorSpec};
use ganda_core::phantom::{dataset_params, generate_phantom, PhantomParams};
use ganda_core::training::{train, PatchDataset};
use ganda_core::{PixelLossMode, SourceMode, TrainConfig};

fn main() -> ganda_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: u32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let modes: Vec<SourceMode> = args
        .get(2)
        .map(|s| s.split(',').map(|m| m.parse().expect("mode")).collect())
        .unwrap_or_else(|| vec![SourceMode::Nuclei, SourceMode::Vessel, SourceMode::Both]);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(7);

    let t0 = Instant::now();
    let params = PhantomParams {
        seed,
        pixel_size_um: 2.0,
        ..PhantomParams::default()
    };
    let slides: Vec<_> = dataset_params(6, &params)
        .iter()
        .map(|p| generate_phantom(p).map(|(s, _)| s))
        .collect::<Result<_, _>>()?;
    let (train_slides, test) = slides.split_at(5);
    let test = &test[0];
    let dataset = PatchDataset::from_slides(train_slides, 64)?;
    println!("phantoms + tiling: {:.1?}, {} training tiles", t0.elapsed(), dataset.len());

    for mode in modes {
        let t = Instant::now();
        let gspec = GeneratorSpec::scaled(mode.channel_count(), &[8, 16, 32]);
        let dspec = DiscriminatorSpec::scaled(64, &[8, 16, 32]);
        let cfg = TrainConfig {
            epochs,
            seed,
            pixel_loss_mode: PixelLossMode::Mse,
            alpha: 1.0,
            beta: 100.0,
            recalibrate_batch_norm: true,
            ..TrainConfig::default()
        };
        let out = train(&dataset, mode, &gspec, &dspec, &cfg)?;
        let last = out.losses.last().expect("at least one step");
        let pred = predict_slide(out.final_checkpoint(), test, mode)?;
        let merged = merge_channels(test, &pred)?;
        let rois = Roi::grid(1024, 1024, 128);
        let acfg = AnalysisConfig { pixel_size_um: test.pixel_size_um(), ..AnalysisConfig::default() };
        let rep = compare_report(test, &merged, &rois, &acfg)?;
        println!(
            "{mode:?}: {:.1?} | last d={:.3} adv={:.3} pix={:.4} | MSE {:.2} R2 {:.3} slope {:.3} | median real {:.2} pred {:.2}",
            t.elapsed(),
            last.d_loss,
            last.g_adv_loss,
            last.g_pix_loss,
            rep.mse,
            rep.regression.r_squared,
            rep.regression.slope,
            rep.distance_real.median_um,
            rep.distance_pred.median_um
        );
    }
    Ok(())
}
