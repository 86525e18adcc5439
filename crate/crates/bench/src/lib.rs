//! Deterministic fixtures shared by the benchmarks in `benches/`.

use ganda_core::networks::Tensor;
use ganda_core::phantom::generate_phantom;
use ganda_core::raster::{Mask, Raster};
use ganda_core::{PhantomParams, SlideImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Phantom slide of `size` x `size` pixels.
pub fn phantom_slide(size: usize, seed: u64) -> SlideImage {
    let params = PhantomParams {
        width_px: size,
        height_px: size,
        seed,
        ..PhantomParams::default()
    };
    generate_phantom(&params).expect("valid phantom params").0
}

/// Mask with roughly `density` of its pixels set, and at least one.
pub fn random_mask(size: usize, density: f64, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Raster::from_fn(size, size, |_, _| rng.random_bool(density));
    mask.set(size / 2, size / 2, true);
    mask
}

/// Uniform values in [-1, 1].
pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(random_mask(32, 0.1, 3), random_mask(32, 0.1, 3));
        assert_eq!(random_tensor([1, 1, 4, 4], 9).data, random_tensor([1, 1, 4, 4], 9).data);
        assert_eq!(phantom_slide(64, 1).dims(), (64, 64));
        assert!(random_mask(8, 0.0, 1).count_true() >= 1);
    }
}
