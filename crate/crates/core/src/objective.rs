//! Classifier head and the training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::layers::Linear;
use crate::params::{ParamStore, ParamVars};
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA1: f64 = 0.1;
pub const DEFAULT_LAMBDA2: f64 = 0.001;

/// `input -> hidden -> ReLU -> 2` logits.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub hidden: Linear,
    pub out: Linear,
    pub input: usize,
}

impl Classifier {
    pub fn new<T: Scalar, R: Rng>(input: usize, hidden: usize, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, "cls.hidden", input, hidden, rng),
            out: Linear::new(store, "cls.out", hidden, 2, rng),
            input,
        }
    }

    pub fn logits_fwd<T: Scalar>(&self, tape: &Tape<T>, pv: &ParamVars, x: Var) -> Var {
        let h = self.hidden.forward(tape, pv, x);
        let h = tape.relu(h);
        self.out.forward(tape, pv, h)
    }
}

/// `(p_non_rumor, p_rumor)` from two logits.
pub fn softmax_pair(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `-ln probs[y]`.
pub fn ce_loss(probs: [f64; 2], y: usize) -> f64 {
    -probs[y].ln()
}

/// CE computed from logits through log-softmax.
pub fn ce_from_logits(logits: [f64; 2], y: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[y]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub kl: f64,
    pub rec: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

pub fn total_loss(cls: f64, kl: f64, rec: f64, lambda1: f64, lambda2: f64) -> LossBreakdown {
    LossBreakdown {
        cls,
        kl,
        rec,
        total: cls + (lambda1 * kl + lambda2 * rec),
        lambda1,
        lambda2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_values() {
        assert!((ce_loss([0.5, 0.5], 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ce_loss([0.5, 0.5], 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce_loss([1e-12, 1.0 - 1e-12], 1) < 1e-9);
        assert!((ce_loss([0.9, 0.1], 1) - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn total_loss_values() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2).total, 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2).total, 1.203);
        assert_eq!(total_loss(0.7, 2.0, 3.0, 0.0, 0.0).total, 0.7);
    }

    #[test]
    fn equal_logits_give_half() {
        assert_eq!(softmax_pair([0.0, 0.0]), [0.5, 0.5]);
        assert_eq!(softmax_pair([3.5, 3.5]), [0.5, 0.5]);
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let p = softmax_pair([a, b]);
            proptest::prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        }

        #[test]
        fn ce_shift_invariant(a in -20.0f64..20.0, b in -20.0f64..20.0, c in -100.0f64..100.0, y in 0usize..2) {
            let base = ce_from_logits([a, b], y);
            let shifted = ce_from_logits([a + c, b + c], y);
            proptest::prop_assert!((base - shifted).abs() < 1e-6);
        }

        #[test]
        fn total_is_linear(cls in 0.0f64..5.0, kl in 0.0f64..5.0, rec in 0.0f64..5.0, k in 0.0f64..4.0) {
            let a = total_loss(cls, kl, rec, 0.1, 0.001).total;
            let b = total_loss(k * cls, k * kl, k * rec, 0.1, 0.001).total;
            proptest::prop_assert!((b - k * a).abs() < 1e-9);
        }
    }
}
