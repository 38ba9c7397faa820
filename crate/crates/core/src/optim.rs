//! Adam and the loss-saturation learning-rate rule.

use serde::{Deserialize, Serialize};

use crate::model::{Component, ModelParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments mirror the parameter structure one-to-one.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let z = params.zeros_like();
        Self { m: z.clone(), v: z, step: 0, lr }
    }

    /// One bias-corrected Adam step on the listed components; everything
    /// else (parameters and moments) is left untouched.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams, components: &[Component]) {
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(ADAM_BETA1, t);
        let c2 = 1.0 - libm::pow(ADAM_BETA2, t);
        let lr = self.lr;
        for c in components {
            let ps = params.group_mut(c).tensors_mut();
            let ms = self.m.group_mut(c).tensors_mut();
            let vs = self.v.group_mut(c).tensors_mut();
            let gs = grads.group(c).named();
            for (((p, m), v), (_, g)) in ps.into_iter().zip(ms).zip(vs).zip(gs) {
                for i in 0..p.data.len() {
                    let gi = g.data[i];
                    let mi = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                    let vi = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                    m.data[i] = mi;
                    v.data[i] = vi;
                    let update = lr * (mi / c1) / (libm::sqrt(vi / c2) + ADAM_EPS);
                    if update != 0.0 {
                        p.data[i] -= update;
                    }
                }
            }
        }
    }
}

/// Tracks the best loss seen and how long it has stalled.
///
/// An observation improves on the best only if it is lower by more than
/// `tolerance` relative to it. After `patience` consecutive non-improving
/// observations a drop is signalled and the counter restarts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub best: Option<f64>,
    pub stalled: usize,
}

impl Plateau {
    pub fn observe(&mut self, loss: f64, patience: usize, tolerance: f64) -> bool {
        match self.best {
            None => {
                self.best = Some(loss);
                false
            }
            Some(best) => {
                if loss < best - tolerance * libm::fabs(best) {
                    self.best = Some(loss);
                    self.stalled = 0;
                    return false;
                }
                if loss < best {
                    self.best = Some(loss);
                }
                self.stalled += 1;
                if patience > 0 && self.stalled >= patience {
                    self.stalled = 0;
                    true
                } else {
                    false
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchConfig};

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut p = init_params(0, &ArchConfig::default()).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.encoder.stem_w.data[0] = 1.0;
        let mut opt = OptimizerState::new(&p, 0.0);
        opt.apply(&mut p, &g, &Component::ALL);
        assert_eq!(p, before);
    }

    #[test]
    fn only_listed_components_move() {
        let mut p = init_params(0, &ArchConfig::default()).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.encoder.stem_w.data[0] = 1.0;
        g.dseg.wq.data[0] = 1.0;
        let mut opt = OptimizerState::new(&p, 1e-3);
        opt.apply(&mut p, &g, &[Component::Encoder]);
        assert_ne!(p.encoder, before.encoder);
        assert_eq!(p.dseg, before.dseg);
        // The first Adam step moves a parameter with non-zero gradient by lr.
        assert!((before.encoder.stem_w.data[0] - p.encoder.stem_w.data[0] - 1e-3).abs() < 1e-9);
        assert_eq!(before.encoder.stem_w.data[1], p.encoder.stem_w.data[1]);
    }

    #[test]
    fn plateau_rules() {
        let mut pl = Plateau::default();
        let mut loss = 1.0;
        for _ in 0..21 {
            assert!(!pl.observe(loss, 20, 1e-3));
            loss *= 0.95;
        }
        let mut pl = Plateau::default();
        let mut drops = 0;
        for i in 0..41 {
            if pl.observe(1.0 - 1e-5 * i as f64, 20, 1e-3) {
                drops += 1;
            }
        }
        assert_eq!(drops, 2);
    }
}
