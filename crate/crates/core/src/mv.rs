//! Mutual-views prompt.
//!
//! Tagged latents of width `D` are laid out as grids of `tokens x D/tokens`.
//! Text tokens attend over image tokens to form the subjective view `p_1`.
//! `N - 1` down layers (conv, residual block, stride-2 conv) build the
//! pyramid `p_1..p_N`, halving tokens and doubling channels per level.
//! Cross-enhancement walks the pyramid from the deepest level up, gating the
//! comment grid into each level, and the up stack fuses the enhanced levels
//! back into a single vector of length `L_mutual`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::data::Mode;
use crate::layers::{Conv, Linear, ResBlock, UpConv};
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MvError {
    #[error("width {width} is not divisible by {tokens} tokens")]
    IndivisibleWidth { width: usize, tokens: usize },
    #[error("expected width {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("grid shape mismatch: expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid pyramid: {0}")]
    BadGeometry(String),
}

/// A `tokens x channels` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFeature<T> {
    pub values: Array2<T>,
}

impl<T: Scalar> GridFeature<T> {
    pub fn tokens(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Row-major flattening.
    pub fn flatten(&self) -> Array1<T> {
        self.values.iter().copied().collect()
    }
}

/// Row-major `D -> (tokens, D / tokens)` layout.
pub fn reshape_grid<T: Scalar>(v: ArrayView1<T>, tokens: usize) -> Result<GridFeature<T>, MvError> {
    let width = v.len();
    if tokens == 0 || !width.is_multiple_of(tokens) {
        return Err(MvError::IndivisibleWidth { width, tokens });
    }
    let values = v
        .to_owned()
        .into_shape_with_order((tokens, width / tokens))
        .expect("divisible");
    Ok(GridFeature { values })
}

/// Geometry of the pyramid for a given tagged width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pyramid {
    pub width: usize,
    pub tokens: usize,
    pub levels: usize,
}

impl Pyramid {
    pub fn new(width: usize, tokens: usize, levels: usize, heads: usize) -> Result<Self, MvError> {
        if tokens == 0 || !width.is_multiple_of(tokens) {
            return Err(MvError::IndivisibleWidth { width, tokens });
        }
        if levels == 0 {
            return Err(MvError::BadGeometry("at least one level".into()));
        }
        if !tokens.is_multiple_of(1 << (levels - 1)) {
            return Err(MvError::BadGeometry(format!(
                "{tokens} tokens cannot be halved {} times",
                levels - 1
            )));
        }
        if heads == 0 || !(width / tokens).is_multiple_of(heads) {
            return Err(MvError::BadGeometry(format!(
                "{} channels not divisible by {heads} heads",
                width / tokens
            )));
        }
        Ok(Self { width, tokens, levels })
    }

    /// `(tokens, channels)` of 1-based level `l`.
    pub fn level(&self, l: usize) -> (usize, usize) {
        let f = 1 << (l - 1);
        (self.tokens / f, self.width / self.tokens * f)
    }

    pub fn channels(&self) -> usize {
        self.width / self.tokens
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct DownLayer {
    pub conv: Conv,
    pub res: ResBlock,
    pub down: Conv,
}

#[derive(Debug, Clone)]
pub struct UpLayer {
    pub conv: Conv,
    pub res: ResBlock,
    pub up: UpConv,
}

#[derive(Debug, Clone)]
pub struct Terminal {
    pub conv: Conv,
    pub res: ResBlock,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct MvModule {
    pub pyramid: Pyramid,
    pub attn: CrossAttention,
    pub down: Vec<DownLayer>,
    pub gates: Vec<Conv>,
    pub comment_up: Vec<UpConv>,
    pub up: Vec<UpLayer>,
    pub terminal: Option<Terminal>,
    /// Two-modality mode: flattened `p_1` straight to `L_mutual`.
    pub direct: Option<Linear>,
    pub mutual_len: usize,
}

/// Intermediate results of one pass, for inspection.
pub struct MvTrace {
    pub sub: Vec<Var>,
    pub attention: std::sync::Arc<ndarray::ArrayD<f64>>,
    pub gates: Vec<Var>,
    pub objs: Vec<Var>,
    pub mutuals: Vec<Var>,
    pub output: Var,
}

impl MvModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        mode: Mode,
        pyramid: Pyramid,
        heads: usize,
        kernel: usize,
        mutual_len: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let c = pyramid.channels();
        let attn = CrossAttention {
            q: Linear::new(store, "mv.attn.q", c, c, rng),
            k: Linear::new(store, "mv.attn.k", c, c, rng),
            v: Linear::new(store, "mv.attn.v", c, c, rng),
            o: Linear::new(store, "mv.attn.o", c, c, rng),
            ln_gain: store.add("mv.attn.ln.gain", &[c], Init::Ones, rng),
            ln_bias: store.add("mv.attn.ln.bias", &[c], Init::Zeros, rng),
            heads,
        };
        let mut module = Self {
            pyramid,
            attn,
            down: Vec::new(),
            gates: Vec::new(),
            comment_up: Vec::new(),
            up: Vec::new(),
            terminal: None,
            direct: None,
            mutual_len,
        };
        if mode == Mode::Two {
            module.direct = Some(Linear::new(store, "mv.direct", pyramid.width, mutual_len, rng));
            return module;
        }
        let n = pyramid.levels;
        for l in 1..n {
            let (_, cl) = pyramid.level(l);
            let name = format!("mv.down{l}");
            module.down.push(DownLayer {
                conv: Conv::same(store, &format!("{name}.conv"), cl, cl, kernel, rng),
                res: ResBlock::new(store, &format!("{name}.res"), cl, kernel, rng),
                down: Conv::new(store, &format!("{name}.down"), cl, 2 * cl, kernel, 2, kernel / 2, rng),
            });
        }
        for i in 1..=n {
            let (_, cl) = pyramid.level(n - i + 1);
            module
                .gates
                .push(Conv::same(store, &format!("mv.gate{i}"), 2 * cl, cl, kernel, rng));
            if i < n {
                module
                    .comment_up
                    .push(UpConv::new(store, &format!("mv.comment_up{i}"), cl, cl / 2, rng));
            }
        }
        for i in 1..n {
            let (_, cl) = pyramid.level(n - i + 1);
            let name = format!("mv.up{i}");
            module.up.push(UpLayer {
                conv: Conv::same(store, &format!("{name}.conv"), 2 * cl, cl, kernel, rng),
                res: ResBlock::new(store, &format!("{name}.res"), cl, kernel, rng),
                up: UpConv::new(store, &format!("{name}.up"), cl, cl / 2, rng),
            });
        }
        module.terminal = Some(Terminal {
            conv: Conv::same(store, "mv.final.conv", 2 * c, c, kernel, rng),
            res: ResBlock::new(store, "mv.final.res", c, kernel, rng),
            proj: Linear::new(store, "mv.final.proj", pyramid.width, mutual_len, rng),
        });
        module
    }

    fn to_grid<T: Scalar>(&self, tape: &Tape<T>, v: Var, level: usize) -> Var {
        let rows = tape.shape(v)[0];
        let (t, c) = self.pyramid.level(level);
        tape.reshape(v, &[rows, t, c])
    }

    /// `[batch, D] x 2 -> p_1` as `[batch, tokens, channels]`, plus the
    /// attention weights `[batch, heads, tokens, tokens]`.
    pub fn cross_attention_fwd<T: Scalar>(
        &self,
        tape: &Tape<T>,
        pv: &ParamVars,
        text: Var,
        image: Var,
    ) -> (Var, std::sync::Arc<ndarray::ArrayD<T>>) {
        let xt = self.to_grid(tape, text, 1);
        let xi = self.to_grid(tape, image, 1);
        let a = &self.attn;
        let q = a.q.forward(tape, pv, xt);
        let k = a.k.forward(tape, pv, xi);
        let v = a.v.forward(tape, pv, xi);
        let (att, weights) = tape.attention(q, k, v, a.heads);
        let o = a.o.forward(tape, pv, att);
        let res = tape.add(xt, o);
        let out = tape.layer_norm(res, pv.get(a.ln_gain), pv.get(a.ln_bias), T::c(1e-5));
        (out, weights)
    }

    /// Levels `p_1..p_N`.
    pub fn down_fwd<T: Scalar>(&self, tape: &Tape<T>, pv: &ParamVars, p1: Var) -> Vec<Var> {
        let mut levels = vec![p1];
        for layer in &self.down {
            let x = *levels.last().expect("nonempty");
            let h = layer.conv.forward(tape, pv, x);
            let h = tape.relu(h);
            let h = layer.res.forward(tape, pv, h);
            levels.push(layer.down.forward(tape, pv, h));
        }
        levels
    }

    /// Returns `(p^obj_1..p^obj_N, gates w_1..w_N)`; `obj_i` sits at level
    /// `N - i + 1`.
    pub fn cross_enhance_fwd<T: Scalar>(
        &self,
        tape: &Tape<T>,
        pv: &ParamVars,
        levels: &[Var],
        comment: Var,
    ) -> (Vec<Var>, Vec<Var>) {
        let n = levels.len();
        let mut c = self.to_grid(tape, comment, n);
        let mut objs = Vec::with_capacity(n);
        let mut gates = Vec::with_capacity(n);
        for i in 1..=n {
            let p = levels[n - i];
            let cat = tape.concat_last(&[p, c]);
            let w = self.gates[i - 1].forward(tape, pv, cat);
            let w = tape.sigmoid(w);
            let cw = tape.mul(c, w);
            objs.push(tape.add(p, cw));
            gates.push(w);
            if i < n {
                c = self.comment_up[i - 1].forward(tape, pv, c);
            }
        }
        (objs, gates)
    }

    /// Returns `(p^mutual as [batch, L_mutual], intermediate mutual grids)`.
    pub fn up_fwd<T: Scalar>(&self, tape: &Tape<T>, pv: &ParamVars, objs: &[Var], init: Var) -> (Var, Vec<Var>) {
        let mut mutual = init;
        let mut mutuals = vec![init];
        for (layer, &obj) in self.up.iter().zip(objs) {
            let cat = tape.concat_last(&[obj, mutual]);
            let h = layer.conv.forward(tape, pv, cat);
            let h = tape.relu(h);
            let h = layer.res.forward(tape, pv, h);
            mutual = layer.up.forward(tape, pv, h);
            mutuals.push(mutual);
        }
        let term = self.terminal.as_ref().expect("three-modality pyramid");
        let last = *objs.last().expect("N >= 1");
        let cat = tape.concat_last(&[last, mutual]);
        let h = term.conv.forward(tape, pv, cat);
        let h = tape.relu(h);
        let h = term.res.forward(tape, pv, h);
        let rows = tape.shape(h)[0];
        let flat = tape.reshape(h, &[rows, self.pyramid.width]);
        (term.proj.forward(tape, pv, flat), mutuals)
    }

    /// Full pass. `comment` is `None` in two-modality mode.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        pv: &ParamVars,
        text: Var,
        image: Var,
        comment: Option<Var>,
    ) -> MvPass {
        let (p1, weights) = self.cross_attention_fwd(tape, pv, text, image);
        let weights = std::sync::Arc::new(weights.mapv(|v| v.to_f64_lossy()));
        if let Some(direct) = &self.direct {
            let rows = tape.shape(p1)[0];
            let flat = tape.reshape(p1, &[rows, self.pyramid.width]);
            let output = direct.forward(tape, pv, flat);
            return MvPass {
                output,
                trace: MvTrace {
                    sub: vec![p1],
                    attention: weights,
                    gates: vec![],
                    objs: vec![],
                    mutuals: vec![],
                    output,
                },
            };
        }
        let comment = comment.expect("three-modality pyramid requires a comment input");
        let levels = self.down_fwd(tape, pv, p1);
        let (objs, gates) = self.cross_enhance_fwd(tape, pv, &levels, comment);
        let init = *levels.last().expect("N >= 1");
        let (output, mutuals) = self.up_fwd(tape, pv, &objs, init);
        MvPass {
            output,
            trace: MvTrace {
                sub: levels,
                attention: weights,
                gates,
                objs,
                mutuals,
                output,
            },
        }
    }
}

pub struct MvPass {
    pub output: Var,
    pub trace: MvTrace,
}
