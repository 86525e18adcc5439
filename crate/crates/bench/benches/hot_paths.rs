use std::collections::HashMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ganda_bench::{phantom_slide, random_mask, random_tensor};
use ganda_core::analysis::{euclidean_distance_transform, extravasation_stats, positive_mask};
use ganda_core::networks::{Generator, Mode};
use ganda_core::raster::Plane;
use ganda_core::slide_io::ChannelRole;
use ganda_core::tiling::{decompose, decompose_filtered, recompose};
use ganda_core::training::Trainer;
use ganda_core::{DiscriminatorSpec, GeneratorSpec, PixelLossMode, TrainConfig};

fn edt(c: &mut Criterion) {
    let mut g = c.benchmark_group("edt");
    for size in [256, 1024] {
        let mask = random_mask(size, 0.01, 1);
        g.bench_with_input(BenchmarkId::from_parameter(size), &mask, |b, m| {
            b.iter(|| euclidean_distance_transform(black_box(m), 1.0).unwrap())
        });
    }
    g.finish();
}

fn distance_stats(c: &mut Criterion) {
    let slide = phantom_slide(1024, 2);
    let np = positive_mask(slide.channel(ChannelRole::Np).unwrap(), 10);
    let vessel = positive_mask(slide.channel(ChannelRole::Vessel).unwrap(), 0);
    c.bench_function("extravasation_stats/1024", |b| {
        b.iter(|| extravasation_stats(black_box(&np), &vessel, 1.0).unwrap())
    });
}

fn tiling(c: &mut Criterion) {
    let slide = phantom_slide(1024, 3);
    let mut g = c.benchmark_group("tiling");
    for patch in [64, 512] {
        g.bench_with_input(BenchmarkId::new("decompose_filtered", patch), &patch, |b, &p| {
            b.iter(|| decompose_filtered(black_box(&slide), p).unwrap())
        });
        let (m, patches) = decompose(&slide, patch).unwrap();
        let tiles: HashMap<(usize, usize), Plane> = patches
            .iter()
            .map(|t| (t.key(), t.channel(ChannelRole::Np).unwrap().clone()))
            .collect();
        g.bench_with_input(BenchmarkId::new("recompose", patch), &patch, |b, _| {
            b.iter(|| recompose(black_box(&m), &tiles).unwrap())
        });
    }
    g.finish();
}

fn networks(c: &mut Criterion) {
    let spec = GeneratorSpec::scaled(2, &[8, 16, 32]);
    let mut gen = Generator::<f32>::new(&spec, 0).unwrap();
    let x = random_tensor([8, 2, 64, 64], 4);
    c.bench_function("generator_forward/8x2x64x64", |b| {
        b.iter(|| gen.forward(black_box(&x), Mode::Eval).unwrap())
    });

    let cfg = TrainConfig {
        pixel_loss_mode: PixelLossMode::Mse,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(&spec, &DiscriminatorSpec::scaled(64, &[8, 16, 32]), &cfg).unwrap();
    let x = random_tensor([4, 2, 64, 64], 5);
    let z = random_tensor([4, 1, 64, 64], 6);
    c.bench_function("train_step/4x2x64x64", |b| b.iter(|| trainer.train_step(&x, &z, 1).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = edt, distance_stats, tiling, networks
}
criterion_main!(benches);
