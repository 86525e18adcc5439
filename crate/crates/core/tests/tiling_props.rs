use std::collections::HashMap;

use ganda_core::raster::{Plane, Raster};
use ganda_core::slide_io::{ChannelPlane, ChannelRole};
use ganda_core::tiling::{decompose, decompose_filtered, denormalize, normalize, padded_dims, recompose};
use ganda_core::SlideImage;
use proptest::prelude::*;

fn slide_from(w: usize, h: usize, seed: u64) -> SlideImage {
    let channels = ChannelRole::ALL
        .iter()
        .enumerate()
        .map(|(k, &role)| ChannelPlane {
            role,
            data: Raster::from_fn(w, h, |x, y| {
                let v = (x as u64 * 31 + y as u64 * 17 + k as u64 * 7).wrapping_mul(seed | 1);
                // Sparse source channels so some tiles are empty.
                if k < 2 && v % 5 != 0 {
                    0
                } else {
                    (v >> 3) as u8
                }
            }),
        })
        .collect();
    SlideImage::new("prop", 1.0, channels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recompose_inverts_decompose(w in 1usize..200, h in 1usize..200, p in prop::sample::select(vec![8usize, 16, 64]), seed: u64) {
        let slide = slide_from(w, h, seed);
        let (m, patches) = decompose(&slide, p).unwrap();
        prop_assert_eq!((m.padded_width_px, m.padded_height_px), padded_dims(w, h, p));
        prop_assert_eq!(m.records.len(), m.grid_rows() * m.grid_cols());
        for role in ChannelRole::ALL {
            let tiles: HashMap<(usize, usize), Plane> =
                patches.iter().map(|t| (t.key(), t.channel(role).unwrap().clone())).collect();
            prop_assert_eq!(&recompose(&m, &tiles).unwrap(), slide.channel(role).unwrap());
        }
    }

    #[test]
    fn excluded_tiles_recompose_to_zero(w in 1usize..150, h in 1usize..150, seed: u64) {
        let slide = slide_from(w, h, seed);
        let (m, patches) = decompose_filtered(&slide, 16).unwrap();
        let tiles: HashMap<(usize, usize), Plane> = patches
            .iter()
            .zip(&m.records)
            .filter(|(_, r)| r.included)
            .map(|(t, _)| (t.key(), t.channel(ChannelRole::Vessel).unwrap().clone()))
            .collect();
        // Excluded tiles hold no vessel signal, so zero-filling them is lossless.
        prop_assert_eq!(&recompose(&m, &tiles).unwrap(), slide.channel(ChannelRole::Vessel).unwrap());
    }

    #[test]
    fn normalized_patches_round_trip(w in 1usize..40, h in 1usize..40, seed: u64) {
        let slide = slide_from(w, h, seed);
        let (_, patches) = decompose(&slide, 8).unwrap();
        for p in &patches {
            let t = normalize(p, &ChannelRole::ALL).unwrap();
            prop_assert!(t.values.iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = denormalize(&t);
            for (plane, role) in back.iter().zip(ChannelRole::ALL) {
                prop_assert_eq!(plane, p.channel(role).unwrap());
            }
        }
    }
}
