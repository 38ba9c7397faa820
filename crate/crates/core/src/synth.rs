//! Synthetic swallow-study videos with analytic ground truth.
//!
//! A scene holds twelve structures with known label codes: a bolus that
//! travels down a curved pharynx channel, an oscillating epiglottis flap
//! inside the channel, a trachea band, a mandible wedge and a column of
//! seven rounded vertebrae. Every mask is rasterised from the shape
//! parameters at pixel centres; intensities are quantised to 8 bits so
//! frames survive an 8-bit round trip exactly.

use alloc::vec::Vec;
use core::f64::consts::PI;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::image::{Image, Mask, Plane};
use crate::rng::{self, tags};

/// The twelve annotated structures and their label codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anatomy {
    Bolus = 1,
    Pharynx = 2,
    Trachea = 3,
    Epiglottis = 4,
    Mandible = 5,
    C1 = 6,
    C2 = 7,
    C3 = 8,
    C4 = 9,
    C5 = 10,
    C6 = 11,
    C7 = 12,
}

pub const NUM_ANATOMIES: usize = 12;

/// All structures in label-code order.
pub const ANATOMIES: [Anatomy; NUM_ANATOMIES] = [
    Anatomy::Bolus,
    Anatomy::Pharynx,
    Anatomy::Trachea,
    Anatomy::Epiglottis,
    Anatomy::Mandible,
    Anatomy::C1,
    Anatomy::C2,
    Anatomy::C3,
    Anatomy::C4,
    Anatomy::C5,
    Anatomy::C6,
    Anatomy::C7,
];

/// Which structure wins a pixel in the flattened label map, highest first.
pub const PRECEDENCE: [Anatomy; NUM_ANATOMIES] = [
    Anatomy::Bolus,
    Anatomy::Epiglottis,
    Anatomy::Pharynx,
    Anatomy::Trachea,
    Anatomy::Mandible,
    Anatomy::C1,
    Anatomy::C2,
    Anatomy::C3,
    Anatomy::C4,
    Anatomy::C5,
    Anatomy::C6,
    Anatomy::C7,
];

impl Anatomy {
    pub fn code(self) -> u8 {
        self as u8
    }

    /// Position in [`ANATOMIES`] and in per-frame mask stacks.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Anatomy::Bolus => "bolus",
            Anatomy::Pharynx => "pharynx",
            Anatomy::Trachea => "trachea",
            Anatomy::Epiglottis => "epiglottis",
            Anatomy::Mandible => "mandible",
            Anatomy::C1 => "c1",
            Anatomy::C2 => "c2",
            Anatomy::C3 => "c3",
            Anatomy::C4 => "c4",
            Anatomy::C5 => "c5",
            Anatomy::C6 => "c6",
            Anatomy::C7 => "c7",
        }
    }

    /// Display name used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            Anatomy::Bolus => "Bolus",
            Anatomy::Pharynx => "Pharynx",
            Anatomy::Trachea => "Trachea",
            Anatomy::Epiglottis => "Epiglottis",
            Anatomy::Mandible => "Mandible",
            Anatomy::C1 => "Cervical Spine (C1)",
            Anatomy::C2 => "Cervical Spine (C2)",
            Anatomy::C3 => "Cervical Spine (C3)",
            Anatomy::C4 => "Cervical Spine (C4)",
            Anatomy::C5 => "Cervical Spine (C5)",
            Anatomy::C6 => "Cervical Spine (C6)",
            Anatomy::C7 => "Cervical Spine (C7)",
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        ANATOMIES
            .get((code as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Validation(alloc::format!("label code {code} outside 1..=12")))
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ANATOMIES
            .iter()
            .find(|a| a.name() == name)
            .copied()
            .ok_or_else(|| Error::Config(alloc::format!("unknown anatomy {name:?}")))
    }
}

/// Scene generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Per-pixel acquisition noise in the source domain.
    pub noise_sigma: f64,
    /// Upper bound on the bolus centre displacement between frames, as a
    /// fraction of the image height.
    pub max_bolus_step: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { frames: 24, height: 256, width: 256, noise_sigma: 0.01, max_bolus_step: 0.05 }
    }
}

/// Photometric source-to-target shift: `contrast * v^gamma + brightness +
/// N(0, noise_sigma)`, clamped and requantised. Masks are never touched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    pub gamma: f64,
    pub noise_sigma: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self { gamma: 0.6, noise_sigma: 0.1, brightness: 0.0, contrast: 1.0, seed: 0 }
    }
}

impl ShiftSpec {
    pub const IDENTITY: ShiftSpec = ShiftSpec { gamma: 1.0, noise_sigma: 0.0, brightness: 0.0, contrast: 1.0, seed: 0 };

    pub fn is_identity(&self) -> bool {
        self.gamma == 1.0 && self.noise_sigma == 0.0 && self.brightness == 0.0 && self.contrast == 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub seed: u64,
    pub scene: SceneConfig,
    pub shift: Option<ShiftSpec>,
}

/// `T` frames with a per-frame stack of twelve masks (indexed by
/// [`Anatomy::index`]) and the precedence-flattened label map.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<Image>,
    pub masks: Vec<Vec<Mask>>,
    pub label_maps: Vec<Plane<u8>>,
    pub meta: VideoMeta,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn mask(&self, frame: usize, anatomy: Anatomy) -> &Mask {
        &self.masks[frame][anatomy.index()]
    }

    /// Presence flags per frame, in label-code order.
    pub fn presence(&self) -> Vec<Vec<bool>> {
        self.masks.iter().map(|stack| stack.iter().map(|m| !m.is_empty_mask()).collect()).collect()
    }

    /// Checks shapes, label codes and label-map precedence.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            bail!(Validation, "video has no frames");
        }
        if self.masks.len() != self.frames.len() || self.label_maps.len() != self.frames.len() {
            bail!(Validation, "frame/mask/label counts differ");
        }
        for (t, ((f, stack), lm)) in self.frames.iter().zip(&self.masks).zip(&self.label_maps).enumerate() {
            f.validate_unit()?;
            if stack.len() != NUM_ANATOMIES {
                bail!(Validation, "frame {t} has {} masks, expected {NUM_ANATOMIES}", stack.len());
            }
            for m in stack {
                m.validate_binary()?;
                if !m.same_dims(f) {
                    bail!(Shape, "frame {t} mask dims differ from frame");
                }
            }
            if let Some(&bad) = lm.data.iter().find(|&&v| v as usize > NUM_ANATOMIES) {
                bail!(Validation, "frame {t} label map holds code {bad}");
            }
            if *lm != flatten_labels(stack) {
                bail!(Validation, "frame {t} label map disagrees with mask precedence");
            }
        }
        Ok(())
    }
}

/// Flattens a mask stack into label codes by [`PRECEDENCE`].
pub fn flatten_labels(stack: &[Mask]) -> Plane<u8> {
    let (h, w) = stack[0].dims();
    let mut out = Plane::filled(h, w, 0u8);
    for a in PRECEDENCE.iter().rev() {
        for (o, &m) in out.data.iter_mut().zip(&stack[a.index()].data) {
            if m != 0 {
                *o = a.code();
            }
        }
    }
    out
}

/// Rounds to the nearest 8-bit level.
pub fn quantize(v: f64) -> f64 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

struct Scene {
    bg: f64,
    texture: [(f64, f64, f64, f64); 3],
    intensity: [f64; NUM_ANATOMIES],
    col_x: f64,
    col_w: f64,
    col_top: f64,
    vert_h: f64,
    vert_gap: f64,
    col_tilt: f64,
    corner_r: f64,
    mandible: [(f64, f64); 3],
    trachea: (f64, f64, f64, f64, f64),
    ph_x0: f64,
    ph_x1: f64,
    ph_v0: f64,
    ph_v1: f64,
    ph_bulge: f64,
    ph_hw: f64,
    epi_s: f64,
    epi_len: f64,
    epi_thick: f64,
    epi_angle: f64,
    epi_amp: f64,
    epi_cycles: f64,
    bolus_ax: f64,
    bolus_ay: f64,
    bolus_phase: f64,
    bolus_travel: f64,
}

impl Scene {
    fn sample(rng: &mut rng::Rng, cfg: &SceneConfig) -> Self {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let mut intensity = [0.0; NUM_ANATOMIES];
        let base = [0.92, 0.40, 0.12, 0.60, 0.70];
        for (i, b) in base.iter().enumerate() {
            intensity[i] = b + u(-0.04, 0.04);
        }
        let spine = 0.78 + u(-0.04, 0.04);
        for v in intensity.iter_mut().skip(5) {
            *v = spine + u(-0.03, 0.03);
        }
        let texture = [
            (u(0.5, 2.0), u(0.5, 2.0), u(0.0, 2.0 * PI), u(0.02, 0.04)),
            (u(1.0, 3.0), u(-2.0, 2.0), u(0.0, 2.0 * PI), u(0.01, 0.03)),
            (u(-3.0, 3.0), u(2.0, 4.0), u(0.0, 2.0 * PI), u(0.01, 0.02)),
        ];
        let ph_v0 = u(0.10, 0.14);
        let ph_v1 = u(0.74, 0.80);
        let span = ph_v1 - ph_v0;
        let full_travel = 0.84 * span;
        let frames = cfg.frames.max(2) as f64 - 1.0;
        let bolus_travel = full_travel.min(0.9 * cfg.max_bolus_step * frames);
        Scene {
            bg: u(0.20, 0.30),
            texture,
            intensity,
            col_x: u(0.70, 0.75),
            col_w: u(0.10, 0.12),
            col_top: u(0.12, 0.16),
            vert_h: u(0.080, 0.090),
            vert_gap: u(0.020, 0.026),
            col_tilt: u(-0.010, 0.010),
            corner_r: u(0.012, 0.018),
            mandible: [
                (0.08 + u(-0.02, 0.02), 0.18 + u(-0.02, 0.02)),
                (0.45 + u(-0.02, 0.02), 0.26 + u(-0.02, 0.02)),
                (0.12 + u(-0.02, 0.02), 0.38 + u(-0.02, 0.02)),
            ],
            trachea: (0.40 + u(-0.01, 0.01), 0.62 + u(-0.02, 0.02), 0.44 + u(-0.01, 0.01), 1.05, u(0.030, 0.040)),
            ph_x0: u(0.53, 0.57),
            ph_x1: u(0.50, 0.54),
            ph_v0,
            ph_v1,
            ph_bulge: u(0.03, 0.05),
            ph_hw: u(0.032, 0.040),
            epi_s: u(0.55, 0.62),
            epi_len: u(0.08, 0.10),
            epi_thick: u(0.012, 0.016),
            epi_angle: u(50.0, 65.0) * PI / 180.0,
            epi_amp: u(8.0, 12.0) * PI / 180.0,
            epi_cycles: u(1.0, 2.0),
            bolus_ax: u(0.024, 0.030),
            bolus_ay: u(0.040, 0.050),
            bolus_phase: u(0.0, 2.0 * PI),
            bolus_travel,
        }
    }

    fn centre_x(&self, s: f64) -> f64 {
        self.ph_x0 + (self.ph_x1 - self.ph_x0) * s + self.ph_bulge * libm::sin(PI * s)
    }

    fn half_width(&self, s: f64) -> f64 {
        self.ph_hw * (1.0 + 0.25 * libm::sin(PI * s))
    }

    fn inside_static(&self, a: Anatomy, u: f64, v: f64) -> bool {
        match a {
            Anatomy::Pharynx => {
                if v < self.ph_v0 || v > self.ph_v1 {
                    return false;
                }
                let s = (v - self.ph_v0) / (self.ph_v1 - self.ph_v0);
                libm::fabs(u - self.centre_x(s)) <= self.half_width(s)
            }
            Anatomy::Trachea => {
                let (u0, v0, u1, v1, hw) = self.trachea;
                segment_distance(u, v, u0, v0, u1, v1) <= hw
            }
            Anatomy::Mandible => in_triangle(u, v, &self.mandible),
            Anatomy::Bolus | Anatomy::Epiglottis => false,
            c => {
                let k = (c.code() - Anatomy::C1.code()) as f64;
                let cx = self.col_x + self.col_tilt * k;
                let cy = self.col_top + k * (self.vert_h + self.vert_gap) + self.vert_h / 2.0;
                rounded_rect(u - cx, v - cy, self.col_w / 2.0, self.vert_h / 2.0, self.corner_r)
            }
        }
    }

    fn inside_dynamic(&self, a: Anatomy, u: f64, v: f64, t: usize, frames: usize) -> bool {
        let phase = if frames > 1 { t as f64 / (frames - 1) as f64 } else { 0.5 };
        match a {
            Anatomy::Bolus => {
                let span = self.ph_v1 - self.ph_v0;
                let start = 0.5 * (span - self.bolus_travel);
                let vc = self.ph_v0 + start + self.bolus_travel * phase;
                let uc = self.centre_x((vc - self.ph_v0) / span);
                let w = 2.0 * PI * 1.5 * phase + self.bolus_phase;
                let ax = self.bolus_ax * (1.0 + 0.15 * libm::sin(w));
                let ay = self.bolus_ay * (1.0 + 0.20 * libm::cos(w));
                let (du, dv) = ((u - uc) / ax, (v - vc) / ay);
                du * du + dv * dv <= 1.0
            }
            Anatomy::Epiglottis => {
                let s = self.epi_s;
                let av = self.ph_v0 + s * (self.ph_v1 - self.ph_v0);
                let au = self.centre_x(s) - 0.9 * self.half_width(s);
                let th = self.epi_angle + self.epi_amp * libm::sin(2.0 * PI * self.epi_cycles * phase);
                let (bu, bv) = (au + self.epi_len * libm::cos(th), av + self.epi_len * libm::sin(th));
                segment_distance(u, v, au, av, bu, bv) <= self.epi_thick
            }
            _ => self.inside_static(a, u, v),
        }
    }

    fn texture_at(&self, u: f64, v: f64) -> f64 {
        self.texture.iter().map(|&(fu, fv, ph, amp)| amp * libm::sin(2.0 * PI * (fu * u + fv * v) + ph)).sum()
    }
}

fn segment_distance(u: f64, v: f64, u0: f64, v0: f64, u1: f64, v1: f64) -> f64 {
    let (du, dv) = (u1 - u0, v1 - v0);
    let len2 = du * du + dv * dv;
    let t = if len2 > 0.0 { (((u - u0) * du + (v - v0) * dv) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (pu, pv) = (u0 + t * du - u, v0 + t * dv - v);
    libm::sqrt(pu * pu + pv * pv)
}

fn in_triangle(u: f64, v: f64, tri: &[(f64, f64); 3]) -> bool {
    let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0);
    let d0 = cross(tri[0], tri[1]);
    let d1 = cross(tri[1], tri[2]);
    let d2 = cross(tri[2], tri[0]);
    let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
    let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
    !(neg && pos)
}

fn rounded_rect(du: f64, dv: f64, hw: f64, hh: f64, r: f64) -> bool {
    let (ax, ay) = (libm::fabs(du), libm::fabs(dv));
    if ax > hw || ay > hh {
        return false;
    }
    let (qx, qy) = (ax - (hw - r), ay - (hh - r));
    !(qx > 0.0 && qy > 0.0 && qx * qx + qy * qy > r * r)
}

fn rasterize(h: usize, w: usize, mut inside: impl FnMut(f64, f64) -> bool) -> Mask {
    Mask::from_fn(h, w, |x, y| inside((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64) as u8)
}

/// Renders the seeded scene. `downsample` is the encoder stride the frames
/// must be divisible by.
pub fn generate_video(seed: u64, config: &SceneConfig, downsample: usize) -> Result<VideoSequence> {
    let (h, w, frames) = (config.height, config.width, config.frames);
    if frames == 0 {
        bail!(Config, "a video needs at least one frame");
    }
    if h == 0 || w == 0 || downsample == 0 || h % downsample != 0 || w % downsample != 0 {
        bail!(Config, "resolution {h}x{w} not divisible by downsample factor {downsample}");
    }
    if !(config.max_bolus_step > 0.0) || !(config.noise_sigma >= 0.0) {
        bail!(Config, "bad scene parameters {config:?}");
    }
    let scene_seed = rng::derive(seed, tags::SCENE);
    let scene = Scene::sample(&mut rng::rng(scene_seed), config);

    let static_masks: Vec<Option<Mask>> = ANATOMIES
        .iter()
        .map(|&a| match a {
            Anatomy::Bolus | Anatomy::Epiglottis => None,
            _ => Some(rasterize(h, w, |u, v| scene.inside_static(a, u, v))),
        })
        .collect();
    let background = Image::from_fn(h, w, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
        scene.bg + scene.texture_at(u, v)
    });

    let mut out = VideoSequence {
        frames: Vec::with_capacity(frames),
        masks: Vec::with_capacity(frames),
        label_maps: Vec::with_capacity(frames),
        meta: VideoMeta { seed, scene: config.clone(), shift: None },
    };
    for t in 0..frames {
        let stack: Vec<Mask> = ANATOMIES
            .iter()
            .zip(&static_masks)
            .map(|(&a, m)| match m {
                Some(m) => m.clone(),
                None => rasterize(h, w, |u, v| scene.inside_dynamic(a, u, v, t, frames)),
            })
            .collect();
        let mut img = background.clone();
        for a in PRECEDENCE.iter().rev() {
            let level = scene.intensity[a.index()];
            for (p, &m) in img.data.iter_mut().zip(&stack[a.index()].data) {
                if m != 0 {
                    *p = 0.15 * *p + 0.85 * level;
                }
            }
        }
        let mut noise = rng::rng(rng::derive_path(seed, &[tags::NOISE, t as u64]));
        for (p, b) in img.data.iter_mut().zip(&background.data) {
            let n = if config.noise_sigma > 0.0 { config.noise_sigma * noise.sample::<f64, _>(StandardNormal) } else { 0.0 };
            *p = quantize(*p + 0.5 * (b - scene.bg) + n);
        }
        out.label_maps.push(flatten_labels(&stack));
        out.frames.push(img);
        out.masks.push(stack);
    }
    Ok(out)
}

/// Applies a photometric domain shift to every frame.
pub fn apply_domain_shift(video: &VideoSequence, spec: &ShiftSpec) -> VideoSequence {
    let mut out = video.clone();
    out.meta.shift = Some(spec.clone());
    if spec.is_identity() {
        return out;
    }
    for (t, f) in out.frames.iter_mut().enumerate() {
        let mut g = rng::rng(rng::derive_path(spec.seed, &[tags::SHIFT, t as u64]));
        for p in f.data.iter_mut() {
            let mut v = spec.contrast * libm::pow(*p, spec.gamma) + spec.brightness;
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * g.sample::<f64, _>(StandardNormal);
            }
            *p = quantize(v);
        }
    }
    out
}

/// Video indices assigned to each side of an 8:2 split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then `ceil(0.8 n)` videos to training (rounding toward
/// the training side) with at least one video kept for testing.
pub fn split_dataset(n_videos: usize, seed: u64) -> Result<Split> {
    if n_videos < 2 {
        bail!(Config, "need at least 2 videos for a train/test split, got {n_videos}");
    }
    let mut idx: Vec<usize> = (0..n_videos).collect();
    idx.shuffle(&mut rng::rng(rng::derive(seed, tags::SPLIT)));
    let n_train = ((n_videos * 4).div_ceil(5)).min(n_videos - 1);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Centroid `(x, y)` of a mask in pixels.
pub fn centroid(mask: &Mask) -> Option<(f64, f64)> {
    let fg = mask.foreground();
    if fg.is_empty() {
        return None;
    }
    let n = fg.len() as f64;
    let (sx, sy) = fg.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
    Some((sx / n, sy / n))
}

/// Label-map histogram, used for quick sanity checks.
pub fn label_counts(lm: &Plane<u8>) -> [usize; NUM_ANATOMIES + 1] {
    let mut c = [0usize; NUM_ANATOMIES + 1];
    for &v in &lm.data {
        c[(v as usize).min(NUM_ANATOMIES)] += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig { frames: 6, height: 64, width: 64, ..SceneConfig::default() }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_video(7, &small(), 16).unwrap();
        let b = generate_video(7, &small(), 16).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_ne!(a.frames[0], generate_video(8, &small(), 16).unwrap().frames[0]);
    }

    #[test]
    fn every_anatomy_present_and_codes_in_range() {
        let v = generate_video(3, &SceneConfig { frames: 8, ..SceneConfig::default() }, 16).unwrap();
        for a in ANATOMIES {
            assert!((0..v.len()).any(|t| !v.mask(t, a).is_empty_mask()), "{a:?} never present");
        }
        for lm in &v.label_maps {
            assert!(lm.data.iter().all(|&c| c <= 12));
        }
    }

    #[test]
    fn bolus_wins_over_pharynx() {
        let v = generate_video(11, &SceneConfig { frames: 8, ..SceneConfig::default() }, 16).unwrap();
        let mut overlaps = 0;
        for t in 0..v.len() {
            let (b, p) = (v.mask(t, Anatomy::Bolus), v.mask(t, Anatomy::Pharynx));
            let mut any = false;
            for i in 0..b.data.len() {
                if b.data[i] == 1 && p.data[i] == 1 {
                    assert_eq!(v.label_maps[t].data[i], 1);
                    any = true;
                }
            }
            overlaps += any as usize;
        }
        assert!(overlaps * 2 > v.len(), "bolus overlaps pharynx in only {overlaps} frames");
    }

    #[test]
    fn bolus_motion_is_smooth() {
        let cfg = SceneConfig { frames: 10, ..SceneConfig::default() };
        let v = generate_video(5, &cfg, 16).unwrap();
        let max_px = cfg.max_bolus_step * cfg.height as f64;
        for t in 1..v.len() {
            let (x0, y0) = centroid(v.mask(t - 1, Anatomy::Bolus)).unwrap();
            let (x1, y1) = centroid(v.mask(t, Anatomy::Bolus)).unwrap();
            let step = libm::sqrt((x1 - x0) * (x1 - x0) + (y1 - y0) * (y1 - y0));
            assert!(step < max_px, "step {step} >= {max_px}");
        }
    }

    #[test]
    fn shift_never_touches_masks() {
        let v = generate_video(2, &small(), 16).unwrap();
        let same = apply_domain_shift(&v, &ShiftSpec::IDENTITY);
        assert_eq!(same.frames, v.frames);
        let s = apply_domain_shift(&v, &ShiftSpec { gamma: 0.6, noise_sigma: 0.1, ..ShiftSpec::default() });
        assert_eq!(s.masks, v.masks);
        assert_eq!(s.label_maps, v.label_maps);
        assert!((s.frames[0].mean() - v.frames[0].mean()).abs() > 1e-3);
        assert_eq!(s, apply_domain_shift(&v, &ShiftSpec { gamma: 0.6, noise_sigma: 0.1, ..ShiftSpec::default() }));
        s.validate().unwrap();
    }

    #[test]
    fn split_ratios() {
        let s = split_dataset(10, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let s = split_dataset(5, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (4, 1));
        assert!(matches!(split_dataset(1, 0), Err(Error::Config(_))));
        let s = split_dataset(10, 3).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn bad_resolution_is_config_error() {
        let cfg = SceneConfig { height: 250, ..small() };
        assert!(matches!(generate_video(0, &cfg, 16), Err(Error::Config(_))));
        assert!(matches!(generate_video(0, &SceneConfig { frames: 0, ..small() }, 16), Err(Error::Config(_))));
    }

    #[test]
    fn anatomy_codes_round_trip() {
        for a in ANATOMIES {
            assert_eq!(Anatomy::from_code(a.code()).unwrap(), a);
            assert_eq!(Anatomy::from_name(a.name()).unwrap(), a);
        }
        assert!(Anatomy::from_code(13).is_err());
        assert!(Anatomy::from_code(0).is_err());
    }
}
