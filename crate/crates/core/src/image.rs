//! Rasters and spatial prompts.
//!
//! Pixel `(x, y)` addresses column `x` and row `y`; the origin is the
//! top-left pixel. Point prompts live on the same lattice, so a point at
//! `(0, 0)` is the centre of the top-left pixel.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Row-major single-channel raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

/// Grayscale frame with intensities in `[0, 1]`.
pub type Image = Plane<f64>;
/// Per-pixel foreground probability.
pub type MaskProb = Plane<f64>;
/// Binary mask with values exactly 0 or 1.
pub type Mask = Plane<u8>;

impl<T: Copy> Plane<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(Shape, "raster dims must be positive, got {height}x{width}");
        }
        if data.len() != height * width {
            bail!(Shape, "raster {height}x{width} needs {} values, got {}", height * width, data.len());
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn same_dims<U>(&self, other: &Plane<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl Plane<f64> {
    /// Checks the intensity invariant: every value finite and in `[0, 1]`.
    pub fn validate_unit(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            bail!(Validation, "non-finite value at pixel {i}");
        }
        if let Some(i) = self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            bail!(Validation, "value {} at pixel {i} outside [0,1]", self.data[i]);
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

impl Plane<u8> {
    pub fn validate_binary(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|&v| v > 1) {
            bail!(Validation, "mask value {} at pixel {i} is not binary", self.data[i]);
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Tight pixel bounding box; `x_max`/`y_max` are exclusive edges.
    pub fn bounding_box(&self) -> Option<BoxPrompt> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != 0 {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| BoxPrompt {
            x_min: x0 as f64,
            y_min: y0 as f64,
            x_max: (x1 + 1) as f64,
            y_max: (y1 + 1) as f64,
        })
    }

    /// Foreground pixel coordinates in raster order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != 0 {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Foreground click. The label is implicit: every point is positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
}

impl PointPrompt {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite()) {
            bail!(Validation, "point ({}, {}) is not finite", self.x, self.y);
        }
        if self.x < 0.0 || self.x >= width as f64 || self.y < 0.0 || self.y >= height as f64 {
            bail!(Validation, "point ({}, {}) outside {width}x{height} image", self.x, self.y);
        }
        Ok(())
    }
}

/// Axis-aligned box; the max edges are exclusive pixel boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxPrompt {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let v = [self.x_min, self.y_min, self.x_max, self.y_max];
        if v.iter().any(|c| !c.is_finite()) {
            bail!(Validation, "box {self:?} is not finite");
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            bail!(Validation, "degenerate box {self:?}");
        }
        if self.x_min < 0.0 || self.y_min < 0.0 || self.x_max > width as f64 || self.y_max > height as f64 {
            bail!(Validation, "box {self:?} outside {width}x{height} image");
        }
        Ok(())
    }
}

/// Either kind of spatial prompt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Prompt {
    Point(PointPrompt),
    Box(BoxPrompt),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounding_box_is_tight_with_exclusive_max() {
        let mut m = Mask::filled(8, 8, 0);
        m.set(2, 3, 1);
        m.set(5, 6, 1);
        let b = m.bounding_box().unwrap();
        assert_eq!(b, BoxPrompt { x_min: 2.0, y_min: 3.0, x_max: 6.0, y_max: 7.0 });
        assert!(Mask::filled(4, 4, 0).bounding_box().is_none());
    }

    #[test]
    fn prompt_bounds() {
        assert!(PointPrompt::new(0.0, 0.0).validate(4, 4).is_ok());
        assert!(PointPrompt::new(4.0, 0.0).validate(4, 4).is_err());
        let bad = BoxPrompt { x_min: 3.0, y_min: 0.0, x_max: 3.0, y_max: 2.0 };
        assert!(bad.validate(4, 4).is_err());
    }

    #[test]
    fn non_finite_image_rejected() {
        let mut img = Image::filled(2, 2, 0.5);
        img.data[3] = f64::NAN;
        assert!(img.validate_unit().is_err());
    }
}
