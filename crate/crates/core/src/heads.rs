//! Objectives of the two baseline self-supervised heads, shared by source
//! pretraining and test-time adaptation.

use alloc::vec;
use alloc::vec::Vec;
use rand::seq::index;

use crate::augment::{apply_geometric, AugmentationSpec, Rotation};
use crate::image::Image;
use crate::model::{self, HeadParams};
use crate::rng::Rng;
use crate::tensor::Grid;

/// Image rotated clockwise by `k` quarter turns.
pub(crate) fn rotate(image: &Image, k: u32) -> Image {
    let spec = AugmentationSpec { rotation: Rotation::from_quarter_turns(k), ..AugmentationSpec::IDENTITY };
    apply_geometric(image, &spec)
}

/// 4-way cross-entropy of the rotation head against label `k`. Accumulates
/// `scale * dL/dhead` into `ghead`; returns the loss and `dL/dgrid` (scaled).
pub(crate) fn rotation_objective(head: &HeadParams, grid: &Grid, k: usize, ghead: &mut HeadParams, scale: f64) -> (f64, Grid) {
    let (pooled, logits) = model::rot_logits(head, grid);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| libm::exp(z - m)).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(logits[k] - m - libm::log(sum));
    let glogits: Vec<f64> =
        exps.iter().enumerate().map(|(i, &e)| scale * (e / sum - if i == k { 1.0 } else { 0.0 })).collect();
    let ggrid = model::rot_backward(head, grid, &pooled, &glogits, ghead);
    (loss, ggrid)
}

/// Zeroes `round(ratio * patches)` of the non-overlapping `patch x patch`
/// tiles. Returns the masked image and the per-pixel hidden flag.
pub fn mask_patches(image: &Image, patch: usize, ratio: f64, rng: &mut Rng) -> (Image, Vec<bool>) {
    let (ph, pw) = (image.height / patch, image.width / patch);
    let total = ph * pw;
    let count = libm::round(ratio.clamp(0.0, 1.0) * total as f64) as usize;
    let mut hidden = vec![false; image.data.len()];
    let mut out = image.clone();
    for t in index::sample(rng, total, count.min(total)).iter() {
        let (ty, tx) = (t / pw, t % pw);
        for y in ty * patch..(ty + 1) * patch {
            for x in tx * patch..(tx + 1) * patch {
                let i = y * image.width + x;
                hidden[i] = true;
                out.data[i] = 0.0;
            }
        }
    }
    (out, hidden)
}

/// Mean squared reconstruction error over hidden pixels only; zero with no
/// gradient when nothing is hidden.
pub(crate) fn recon_objective(
    head: &HeadParams,
    grid: &Grid,
    s: usize,
    target: &Image,
    hidden: &[bool],
    ghead: &mut HeadParams,
    scale: f64,
) -> (f64, Grid) {
    let n = hidden.iter().filter(|&&h| h).count();
    if n == 0 {
        return (0.0, grid.zeros_like());
    }
    let out = model::recon_forward(head, grid, s);
    let mut loss = 0.0;
    let mut gout = vec![0.0; out.len()];
    for i in 0..out.len() {
        if hidden[i] {
            let d = out[i] - target.data[i];
            loss += d * d;
            gout[i] = scale * 2.0 * d / n as f64;
        }
    }
    let ggrid = model::recon_backward(head, grid, s, &out, &gout, ghead);
    (loss / n as f64, ggrid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchConfig};
    use crate::rng;

    #[test]
    fn mask_ratio_counts_tiles() {
        let img = Image::filled(64, 64, 0.5);
        let (m, hidden) = mask_patches(&img, 16, 0.5, &mut rng::rng(1));
        assert_eq!(hidden.iter().filter(|&&h| h).count(), 8 * 256);
        assert!(m.data.iter().zip(&hidden).all(|(&v, &h)| if h { v == 0.0 } else { v == 0.5 }));
        let (_, none) = mask_patches(&img, 16, 0.0, &mut rng::rng(1));
        assert!(none.iter().all(|&h| !h));
    }

    #[test]
    fn untrained_rotation_head_is_at_chance() {
        let p = init_params(0, &ArchConfig::default()).unwrap();
        let img = Image::from_fn(64, 64, |x, y| ((x ^ y) & 7) as f64 / 7.0);
        let feat = model::encode_image(&img, &p).unwrap();
        let mut g = p.rot_head.clone();
        let (loss, _) = rotation_objective(&p.rot_head, &feat.grid, 2, &mut g, 1.0);
        assert!((loss - libm::log(4.0)).abs() < 0.05, "{loss}");
    }

    #[test]
    fn rotation_objective_gradient_matches_differences() {
        let p = init_params(3, &ArchConfig::default()).unwrap();
        let img = Image::from_fn(32, 32, |x, y| ((x * 3 + y) % 11) as f64 / 10.0);
        let mut feat = model::encode_image(&img, &p).unwrap().grid;
        let mut g = p.zeros_like().rot_head;
        let (_, gg) = rotation_objective(&p.rot_head, &feat, 1, &mut g, 1.0);
        let eps = 1e-6;
        for i in [0, 5, 17, 63, 100] {
            let orig = feat.data[i];
            feat.data[i] = orig + eps;
            let up = rotation_objective(&p.rot_head, &feat, 1, &mut g.clone(), 1.0).0;
            feat.data[i] = orig - eps;
            let dn = rotation_objective(&p.rot_head, &feat, 1, &mut g.clone(), 1.0).0;
            feat.data[i] = orig;
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - gg.data[i]).abs() < 1e-8 + 1e-5 * fd.abs(), "{fd} vs {}", gg.data[i]);
        }
    }
}
