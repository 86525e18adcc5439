//! Dense row-major 2D rasters shared by every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::error::{GandaError, Result};

/// Row-major 2D array. `data[y * width + x]` addresses pixel (x, y).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// 8-bit intensity plane.
pub type Plane = Raster<u8>;
/// Boolean mask, e.g. thresholded channel or vessel segmentation.
pub type Mask = Raster<bool>;

impl<T: Clone> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Raster {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Raster<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(GandaError::ShapeMismatch(format!(
                "{} values for a {width}x{height} raster",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn row_mut(&mut self, y: usize) -> &mut [T] {
        &mut self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl<T: Clone + Default> Raster<T> {
    /// Copies the `width`×`height` window at (`x0`, `y0`); pixels past the
    /// source edge read as `T::default()`.
    pub fn window(&self, x0: usize, y0: usize, width: usize, height: usize) -> Raster<T> {
        let mut out = Raster::filled(width, height, T::default());
        let x_end = (x0 + width).min(self.width);
        let y_end = (y0 + height).min(self.height);
        if x0 < x_end {
            for y in y0..y_end {
                let src = &self.row(y)[x0..x_end];
                out.row_mut(y - y0)[..src.len()].clone_from_slice(src);
            }
        }
        out
    }

    /// Writes `patch` with its top-left corner at (`x0`, `y0`), clipping at
    /// this raster's edges.
    pub fn paste(&mut self, patch: &Raster<T>, x0: usize, y0: usize) {
        let x_end = (x0 + patch.width).min(self.width);
        let y_end = (y0 + patch.height).min(self.height);
        if x0 >= x_end {
            return;
        }
        for y in y0..y_end {
            let src = &patch.row(y - y0)[..x_end - x0];
            self.row_mut(y)[x0..x_end].clone_from_slice(src);
        }
    }
}

impl Mask {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
