//! Bias-corrected Adam.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient layout does not match the parameters")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.99,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, cfg: &AdamConfig) -> Result<(), OptimError> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) || !params.same_layout(&self.v) {
            return Err(OptimError::ShapeMismatch);
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let c1 = T::one() - T::c(cfg.beta1.powi(t));
        let c2 = T::one() - T::c(cfg.beta2.powi(t));
        let lr = T::c(cfg.lr);
        let eps = T::c(cfg.epsilon);
        let one = T::one();
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g: &ArrayD<T> = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            let p = params.get_mut(id);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
        Ok(())
    }
}
