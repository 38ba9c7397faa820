//! Segmentation and consistency objectives.
//!
//! All losses reduce by the mean over pixels. Each loss has a matching
//! `*_grad` returning `dL/dpred` per pixel.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::vec;

use crate::error::{bail, Result};
use crate::image::{Mask, MaskProb};

/// Smoothing term in the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;
/// Probability clamp applied before the logarithms in BCE.
pub const BCE_CLAMP: f64 = 1e-7;
/// Default weight of the auxiliary loss in the training objective.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// A scalar loss with the named parts it was assembled from.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub components: Vec<(String, f64)>,
}

impl LossValue {
    pub fn scalar(name: &str, value: f64) -> Self {
        Self { value, components: vec![(String::from(name), value)] }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

fn check_dims<A, B>(a: &crate::image::Plane<A>, b: &crate::image::Plane<B>) -> Result<()>
where
    A: Copy,
    B: Copy,
{
    if !a.same_dims(b) {
        bail!(Shape, "mask dims {}x{} vs {}x{}", a.height, a.width, b.height, b.width);
    }
    Ok(())
}

/// Soft Dice loss `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`.
pub fn dice_loss(pred: &MaskProb, gt: &Mask) -> Result<LossValue> {
    check_dims(pred, gt)?;
    let (i, p, g) = dice_sums(pred, gt);
    Ok(LossValue::scalar("dice", 1.0 - (2.0 * i + DICE_EPS) / (p + g + DICE_EPS)))
}

fn dice_sums(pred: &MaskProb, gt: &Mask) -> (f64, f64, f64) {
    let mut i = 0.0;
    let mut p = 0.0;
    let mut g = 0.0;
    for (&pv, &gv) in pred.data.iter().zip(&gt.data) {
        let gv = gv as f64;
        i += pv * gv;
        p += pv;
        g += gv;
    }
    (i, p, g)
}

pub fn dice_grad(pred: &MaskProb, gt: &Mask) -> Vec<f64> {
    let (i, p, g) = dice_sums(pred, gt);
    let den = p + g + DICE_EPS;
    let num = 2.0 * i + DICE_EPS;
    gt.data.iter().map(|&gv| -(2.0 * gv as f64 * den - num) / (den * den)).collect()
}

/// Mean binary cross-entropy with the prediction clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce_loss(pred: &MaskProb, gt: &Mask) -> Result<LossValue> {
    check_dims(pred, gt)?;
    let n = pred.data.len() as f64;
    let total: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if g != 0 {
                -libm::log(p)
            } else {
                -libm::log(1.0 - p)
            }
        })
        .sum();
    Ok(LossValue::scalar("bce", total / n))
}

pub fn bce_grad(pred: &MaskProb, gt: &Mask) -> Vec<f64> {
    let n = pred.data.len() as f64;
    pred.data
        .iter()
        .zip(&gt.data)
        .map(|(&p, &g)| {
            if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                return 0.0;
            }
            if g != 0 {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect()
}

/// Dice + BCE on the box-prompted prediction.
pub fn main_task_loss(pred_box: &MaskProb, gt: &Mask) -> Result<LossValue> {
    let dice = dice_loss(pred_box, gt)?.value;
    let bce = bce_loss(pred_box, gt)?.value;
    Ok(LossValue { value: dice + bce, components: vec![(String::from("dice"), dice), (String::from("bce"), bce)] })
}

pub fn main_task_grad(pred_box: &MaskProb, gt: &Mask) -> Vec<f64> {
    let mut g = dice_grad(pred_box, gt);
    for (a, b) in g.iter_mut().zip(bce_grad(pred_box, gt)) {
        *a += b;
    }
    g
}

/// BCE on the point-prompted prediction.
pub fn aux_task_loss(pred_point: &MaskProb, gt: &Mask) -> Result<LossValue> {
    bce_loss(pred_point, gt)
}

/// `main + lambda * aux`.
pub fn train_loss(main: &LossValue, aux: &LossValue, lambda: f64) -> LossValue {
    LossValue {
        value: main.value + lambda * aux.value,
        components: vec![(String::from("main"), main.value), (String::from("aux"), aux.value)],
    }
}

/// Mean squared difference of two probability maps in the same frame.
pub fn consistency_loss(m1: &MaskProb, m2: &MaskProb) -> Result<LossValue> {
    check_dims(m1, m2)?;
    let n = m1.data.len() as f64;
    let total: f64 = m1.data.iter().zip(&m2.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(LossValue::scalar("consistency", total / n))
}

/// Gradient of [`consistency_loss`] with respect to `m1`; the gradient for
/// `m2` is its negation.
pub fn consistency_grad(m1: &MaskProb, m2: &MaskProb) -> Vec<f64> {
    let n = m1.data.len() as f64;
    m1.data.iter().zip(&m2.data).map(|(a, b)| 2.0 * (a - b) / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Plane;
    use proptest::prelude::*;

    fn prob(h: usize, w: usize, v: &[f64]) -> MaskProb {
        Plane::new(h, w, v.to_vec()).unwrap()
    }

    fn mask(h: usize, w: usize, v: &[u8]) -> Mask {
        Plane::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn dice_identity_and_empty() {
        let gt = mask(2, 2, &[1, 0, 1, 1]);
        let p = prob(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert!(dice_loss(&p, &gt).unwrap().value.abs() < 1e-5);
        let z = dice_loss(&prob(2, 2, &[0.0; 4]), &mask(2, 2, &[0; 4])).unwrap().value;
        assert!(z.abs() < 1e-12);
    }

    #[test]
    fn dice_half_covered() {
        let gt = mask(2, 2, &[1, 1, 0, 0]);
        let p = prob(2, 2, &[1.0; 4]);
        let oracle = 1.0 - (2.0 * 2.0 + DICE_EPS) / (4.0 + 2.0 + DICE_EPS);
        assert!((dice_loss(&p, &gt).unwrap().value - oracle).abs() < 1e-12);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn bce_values() {
        let half = prob(1, 2, &[0.5, 0.5]);
        let v = bce_loss(&half, &mask(1, 2, &[1, 0])).unwrap().value;
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);
        let v = bce_loss(&prob(1, 2, &[0.9, 0.2]), &mask(1, 2, &[1, 0])).unwrap().value;
        let oracle = (-libm::log(0.9) - libm::log(0.8)) / 2.0;
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.164252).abs() < 1e-6);
        let exact = bce_loss(&prob(1, 2, &[1.0, 0.0]), &mask(1, 2, &[1, 0])).unwrap().value;
        assert!(exact <= -libm::log(1.0 - BCE_CLAMP) + 1e-15);
        assert_eq!(aux_task_loss(&half, &mask(1, 2, &[0, 0])).unwrap(), bce_loss(&half, &mask(1, 2, &[0, 0])).unwrap());
    }

    #[test]
    fn main_loss_is_sum_of_parts() {
        let gt = mask(2, 2, &[1, 1, 0, 0]);
        let p = prob(2, 2, &[1.0; 4]);
        let l = main_task_loss(&p, &gt).unwrap();
        assert_eq!(l.value, l.component("dice").unwrap() + l.component("bce").unwrap());
        let d = 1.0 - (4.0 + DICE_EPS) / (6.0 + DICE_EPS);
        let b = (2.0 * -libm::log(BCE_CLAMP) + 2.0 * -libm::log(1.0 - BCE_CLAMP)) / 4.0;
        assert!((l.value - (d + b)).abs() < 1e-9);
    }

    #[test]
    fn train_loss_weighting() {
        let m = LossValue::scalar("main", 1.0);
        let a = LossValue::scalar("aux", 0.5);
        assert!((train_loss(&m, &a, 0.2).value - 1.1).abs() < 1e-15);
        assert_eq!(train_loss(&m, &a, 0.0).value, 1.0);
        assert_eq!(DEFAULT_LAMBDA, 0.2);
    }

    #[test]
    fn consistency_values() {
        let a = prob(1, 2, &[0.8, 0.2]);
        let b = prob(1, 2, &[0.6, 0.6]);
        assert!((consistency_loss(&a, &b).unwrap().value - 0.1).abs() < 1e-12);
        assert_eq!(consistency_loss(&a, &a).unwrap().value, 0.0);
        let one = prob(1, 2, &[1.0, 1.0]);
        let zero = prob(1, 2, &[0.0, 0.0]);
        assert_eq!(consistency_loss(&one, &zero).unwrap().value, 1.0);
        assert!(consistency_loss(&a, &prob(2, 1, &[0.0, 0.0])).is_err());
    }

    #[test]
    fn gradients_match_differences() {
        let gt = mask(2, 3, &[1, 0, 1, 1, 0, 0]);
        let p = prob(2, 3, &[0.3, 0.6, 0.8, 0.55, 0.1, 0.45]);
        let q = prob(2, 3, &[0.2, 0.1, 0.9, 0.5, 0.7, 0.3]);
        let checks: [(&dyn Fn(&MaskProb) -> f64, Vec<f64>); 3] = [
            (&|x| dice_loss(x, &gt).unwrap().value, dice_grad(&p, &gt)),
            (&|x| bce_loss(x, &gt).unwrap().value, bce_grad(&p, &gt)),
            (&|x| consistency_loss(x, &q).unwrap().value, consistency_grad(&p, &q)),
        ];
        for (f, g) in checks.iter() {
            for i in 0..6 {
                let mut up = p.clone();
                up.data[i] += 1e-6;
                let mut dn = p.clone();
                dn.data[i] -= 1e-6;
                let num = (f(&up) - f(&dn)) / 2e-6;
                assert!((num - g[i]).abs() < 1e-7, "{num} vs {}", g[i]);
            }
        }
    }

    fn tile(p: &MaskProb) -> MaskProb {
        MaskProb::from_fn(p.height * 2, p.width * 2, |x, y| p.get(x % p.width, y % p.height))
    }

    proptest! {
        #[test]
        fn consistency_symmetric_and_bounded(v in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..40)) {
            let a = prob(1, v.len(), &v.iter().map(|x| x.0).collect::<Vec<_>>());
            let b = prob(1, v.len(), &v.iter().map(|x| x.1).collect::<Vec<_>>());
            let ab = consistency_loss(&a, &b).unwrap().value;
            prop_assert_eq!(ab, consistency_loss(&b, &a).unwrap().value);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn losses_nonnegative_and_resolution_invariant(
            v in proptest::collection::vec((0.0f64..=1.0, 0u8..=1), 4..=4)
        ) {
            let p = prob(2, 2, &v.iter().map(|x| x.0).collect::<Vec<_>>());
            let g = mask(2, 2, &v.iter().map(|x| x.1).collect::<Vec<_>>());
            let gt2 = Mask::from_fn(4, 4, |x, y| g.get(x % 2, y % 2));
            let d = dice_loss(&p, &g).unwrap().value;
            let b = bce_loss(&p, &g).unwrap().value;
            prop_assert!(d >= 0.0 && d < 1.0);
            prop_assert!(b >= 0.0);
            prop_assert!((b - bce_loss(&tile(&p), &gt2).unwrap().value).abs() < 1e-12);
            let q = prob(2, 2, &[0.1, 0.9, 0.4, 0.6]);
            let c1 = consistency_loss(&p, &q).unwrap().value;
            prop_assert!((c1 - consistency_loss(&tile(&p), &tile(&q)).unwrap().value).abs() < 1e-12);
        }
    }
}
