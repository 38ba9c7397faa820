//! Invertible geometric and photometric augmentation of image + prompt
//! pairs.
//!
//! The geometric part is a flip/right-angle-rotation of the pixel lattice,
//! applied in the order horizontal flip, vertical flip, clockwise rotation.
//! It is a permutation of pixels, so [`invert_geometric`] is exact.

use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{Image, MaskProb, Plane, PointPrompt};
use crate::rng;

/// Clockwise rotation by a multiple of 90 degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    #[default]
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn from_quarter_turns(k: u32) -> Self {
        match k % 4 {
            0 => Rotation::R0,
            1 => Rotation::R90,
            2 => Rotation::R180,
            _ => Rotation::R270,
        }
    }

    pub fn quarter_turns(self) -> usize {
        self as usize
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }

    fn swaps_axes(self) -> bool {
        matches!(self, Rotation::R90 | Rotation::R270)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub rotation: Rotation,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub gamma: f64,
    pub brightness_shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl AugmentationSpec {
    pub const IDENTITY: AugmentationSpec = AugmentationSpec {
        rotation: Rotation::R0,
        horizontal_flip: false,
        vertical_flip: false,
        gamma: 1.0,
        brightness_shift: 0.0,
        noise_sigma: 0.0,
        seed: 0,
    };

    /// Output dims of the geometric transform for an input of `(h, w)`.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.rotation.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Maps input lattice coordinates of an `h x w` raster to output ones.
    pub fn map_coord(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let (wf, hf) = (w as f64 - 1.0, h as f64 - 1.0);
        let x = if self.horizontal_flip { wf - x } else { x };
        let y = if self.vertical_flip { hf - y } else { y };
        match self.rotation {
            Rotation::R0 => (x, y),
            Rotation::R90 => (hf - y, x),
            Rotation::R180 => (wf - x, hf - y),
            Rotation::R270 => (y, wf - x),
        }
    }

    fn map_index(&self, x: usize, y: usize, h: usize, w: usize) -> (usize, usize) {
        let x = if self.horizontal_flip { w - 1 - x } else { x };
        let y = if self.vertical_flip { h - 1 - y } else { y };
        match self.rotation {
            Rotation::R0 => (x, y),
            Rotation::R90 => (h - 1 - y, x),
            Rotation::R180 => (w - 1 - x, h - 1 - y),
            Rotation::R270 => (y, w - 1 - x),
        }
    }
}

/// Sampling ranges for test-time views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRanges {
    pub rotations: bool,
    pub flips: bool,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub brightness_max: f64,
    pub noise_sigma_max: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self { rotations: true, flips: true, gamma_min: 0.5, gamma_max: 2.0, brightness_max: 0.2, noise_sigma_max: 0.1 }
    }
}

/// Draws a spec; gamma is log-uniform over its range.
pub fn sample_spec(ranges: &AugmentRanges, rng: &mut rng::Rng) -> AugmentationSpec {
    let rotation = if ranges.rotations { Rotation::from_quarter_turns(rng.random_range(0..4)) } else { Rotation::R0 };
    let (hf, vf) = if ranges.flips { (rng.random_bool(0.5), rng.random_bool(0.5)) } else { (false, false) };
    let (lo, hi) = (libm::log(ranges.gamma_min), libm::log(ranges.gamma_max));
    let gamma = libm::exp(lo + (hi - lo) * rng.random::<f64>());
    let brightness_shift = ranges.brightness_max * (2.0 * rng.random::<f64>() - 1.0);
    let noise_sigma = ranges.noise_sigma_max * rng.random::<f64>();
    AugmentationSpec { rotation, horizontal_flip: hf, vertical_flip: vf, gamma, brightness_shift, noise_sigma, seed: rng.random() }
}

/// Geometric part only, for any raster.
pub fn apply_geometric<T: Copy + Default>(plane: &Plane<T>, spec: &AugmentationSpec) -> Plane<T> {
    let (h, w) = (plane.height, plane.width);
    let (oh, ow) = spec.output_dims(h, w);
    let mut out = Plane { height: oh, width: ow, data: alloc::vec![T::default(); oh * ow] };
    for y in 0..h {
        for x in 0..w {
            let (nx, ny) = spec.map_index(x, y, h, w);
            out.data[ny * ow + nx] = plane.data[y * w + x];
        }
    }
    out
}

/// Undoes the geometric part of `spec` on a raster produced under it.
pub fn invert_geometric<T: Copy>(plane: &Plane<T>, spec: &AugmentationSpec) -> Plane<T> {
    let (h, w) = spec.output_dims(plane.height, plane.width);
    Plane::from_fn(h, w, |x, y| {
        let (nx, ny) = spec.map_index(x, y, h, w);
        plane.data[ny * plane.width + nx]
    })
}

/// Photometric part: `v^gamma + brightness + N(0, sigma)`, clamped.
pub fn apply_photometric(image: &Image, spec: &AugmentationSpec) -> Image {
    let mut g = rng::rng(rng::derive(spec.seed, rng::tags::NOISE));
    let data = image
        .data
        .iter()
        .map(|&v| {
            let mut o = if spec.gamma == 1.0 { v } else { libm::pow(v, spec.gamma) };
            o += spec.brightness_shift;
            if spec.noise_sigma > 0.0 {
                o += spec.noise_sigma * g.sample::<f64, _>(StandardNormal);
            }
            o.clamp(0.0, 1.0)
        })
        .collect();
    Image { height: image.height, width: image.width, data }
}

/// Transforms the image (geometry then photometry) and moves the points
/// with the geometry.
pub fn apply_augmentation(image: &Image, points: &[PointPrompt], spec: &AugmentationSpec) -> Result<(Image, Vec<PointPrompt>)> {
    image.validate_unit()?;
    for p in points {
        p.validate(image.height, image.width)?;
    }
    let geo = apply_geometric(image, spec);
    let out = apply_photometric(&geo, spec);
    let pts = points
        .iter()
        .map(|p| {
            let (x, y) = spec.map_coord(p.x, p.y, image.height, image.width);
            PointPrompt::new(x, y)
        })
        .collect();
    Ok((out, pts))
}

/// Inverse geometric transform of a predicted mask.
pub fn invert_mask(mask: &MaskProb, spec: &AugmentationSpec) -> MaskProb {
    invert_geometric(mask, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(rot: u32, hf: bool, vf: bool) -> AugmentationSpec {
        AugmentationSpec { rotation: Rotation::from_quarter_turns(rot), horizontal_flip: hf, vertical_flip: vf, ..AugmentationSpec::IDENTITY }
    }

    #[test]
    fn identity_is_noop() {
        let img = Image::from_fn(4, 6, |x, y| (x + 6 * y) as f64 / 24.0);
        let pts = [PointPrompt::new(2.0, 3.0)];
        let (o, p) = apply_augmentation(&img, &pts, &AugmentationSpec::IDENTITY).unwrap();
        assert_eq!(o, img);
        assert_eq!(p, pts);
    }

    #[test]
    fn quarter_turn_matches_hot_pixel() {
        // One-hot image: the rotated hot pixel must land where the point goes.
        let (w, h) = (7usize, 5usize);
        for (x, y) in [(0usize, 0usize), (6, 4), (2, 3), (5, 1)] {
            let img = Image::from_fn(h, w, |a, b| if (a, b) == (x, y) { 1.0 } else { 0.0 });
            let (o, p) = apply_augmentation(&img, &[PointPrompt::new(x as f64, y as f64)], &spec(1, false, false)).unwrap();
            assert_eq!(o.dims(), (w, h));
            let hot = o.data.iter().position(|&v| v == 1.0).unwrap();
            let (hx, hy) = (hot % o.width, hot / o.width);
            assert_eq!((hx, hy), ((h - 1 - y), x));
            assert_eq!((p[0].x, p[0].y), (hx as f64, hy as f64));
        }
    }

    #[test]
    fn gamma_is_photometric_only() {
        let img = Image::filled(4, 4, 0.5);
        let s = AugmentationSpec { gamma: 2.0, ..AugmentationSpec::IDENTITY };
        let pts = [PointPrompt::new(1.0, 2.0)];
        let (o, p) = apply_augmentation(&img, &pts, &s).unwrap();
        assert!(o.data.iter().all(|&v| v == 0.25));
        assert_eq!(p, pts);
    }

    #[test]
    fn asymmetric_mask_round_trip_all_specs() {
        let m = MaskProb::from_fn(5, 8, |x, y| (x * 3 + y * 11) as f64);
        for rot in 0..4 {
            for hf in [false, true] {
                for vf in [false, true] {
                    let s = spec(rot, hf, vf);
                    let fwd = apply_geometric(&m, &s);
                    // Brute-force: every pixel must come back to its origin.
                    let back = invert_mask(&fwd, &s);
                    assert_eq!(back, m);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn photometric_output_stays_in_unit_range(g in 0.5f64..2.0, b in -0.2f64..0.2, s in 0.0f64..0.1, seed: u64) {
            let img = Image::from_fn(8, 8, |x, y| ((x * 8 + y) as f64) / 63.0);
            let spec = AugmentationSpec { gamma: g, brightness_shift: b, noise_sigma: s, seed, ..AugmentationSpec::IDENTITY };
            let o = apply_photometric(&img, &spec);
            prop_assert!(o.validate_unit().is_ok());
        }

        #[test]
        fn points_follow_pixels(rot in 0u32..4, hf: bool, vf: bool, x in 0usize..9, y in 0usize..6) {
            let s = spec(rot, hf, vf);
            let img = Image::from_fn(6, 9, |a, b| if (a, b) == (x, y) { 1.0 } else { 0.0 });
            let (o, p) = apply_augmentation(&img, &[PointPrompt::new(x as f64, y as f64)], &s).unwrap();
            prop_assert_eq!(o.get(p[0].x as usize, p[0].y as usize), 1.0);
        }
    }
}
