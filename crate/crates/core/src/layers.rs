//! Parameterized building blocks shared by the model components.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let w = store.add(
            format!("{name}.w"),
            &[input, output],
            Init::Glorot { fan_in: input, fan_out: output },
            rng,
        );
        let b = store.add(format!("{name}.b"), &[output], Init::Zeros, rng);
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, pv: &ParamVars, x: Var) -> Var {
        tape.linear(x, pv.get(self.w), pv.get(self.b))
    }
}

/// 1-d convolution over tokens, `[batch, tokens, channels]` layout.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            &[kernel, c_in, c_out],
            Init::Glorot {
                fan_in: kernel * c_in,
                fan_out: kernel * c_out,
            },
            rng,
        );
        let b = store.add(format!("{name}.b"), &[c_out], Init::Zeros, rng);
        Self { w, b, stride, pad }
    }

    /// Length-preserving convolution (odd kernel, stride 1).
    pub fn same<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(store, name, c_in, c_out, kernel, 1, kernel / 2, rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, pv: &ParamVars, x: Var) -> Var {
        tape.conv1d(x, pv.get(self.w), pv.get(self.b), self.stride, self.pad)
    }
}

/// Transposed convolution doubling the token count.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl UpConv {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let w = store.add(
            format!("{name}.w"),
            &[2, c_in, c_out],
            Init::Glorot {
                fan_in: 2 * c_in,
                fan_out: 2 * c_out,
            },
            rng,
        );
        let b = store.add(format!("{name}.b"), &[c_out], Init::Zeros, rng);
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, pv: &ParamVars, x: Var) -> Var {
        tape.conv_transpose1d(x, pv.get(self.w), pv.get(self.b), 2, 0)
    }
}

/// `x + conv_b(relu(conv_a(x)))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub a: Conv,
    pub b: Conv,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            a: Conv::same(store, &format!("{name}.a"), channels, channels, kernel, rng),
            b: Conv::same(store, &format!("{name}.b"), channels, channels, kernel, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, pv: &ParamVars, x: Var) -> Var {
        let h = self.a.forward(tape, pv, x);
        let h = tape.relu(h);
        let h = self.b.forward(tape, pv, h);
        tape.add(x, h)
    }
}
