use crate::error::{GandaError, Result};
use crate::raster::{Mask, Raster};

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher). `f` holds
/// squared distances, `INF` for "no site"; the result is written to `d`.
fn envelope_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let Some(q0) = f.iter().position(|v| v.is_finite()) else {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    };
    let mut k = 0usize;
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k];
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            // z[0] is -inf, so this stops at k == 0.
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k];
        let dq = qf - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Squared Euclidean distance (in pixels²) from every pixel to the nearest
/// `true` pixel. All values are exact integers held in `f64`.
pub fn squared_distance_px(mask: &Mask) -> Result<Raster<f64>> {
    if mask.count_true() == 0 {
        return Err(GandaError::EmptyMask);
    }
    let (w, h) = mask.dims();
    let mut g: Raster<f64> = mask.map(|&b| if b { 0.0 } else { f64::INFINITY });

    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for x in 0..w {
        for y in 0..h {
            f[y] = *g.get(x, y);
        }
        envelope_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            g.set(x, y, d[y]);
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(g.row(y));
        envelope_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        g.row_mut(y).copy_from_slice(&d[..w]);
    }
    Ok(g)
}

/// Distance in µm from each pixel to the nearest `true` pixel of `mask`.
pub fn euclidean_distance_transform(mask: &Mask, pixel_size_um: f64) -> Result<Raster<f64>> {
    let sq = squared_distance_px(mask)?;
    Ok(sq.map(|&s| s.sqrt() * pixel_size_um))
}
