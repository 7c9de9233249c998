//! Tensor-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and a closure mapping the output gradient to parent gradients. Nodes
//! are appended in evaluation order, so a single reverse sweep in
//! [`Tape::backward`] visits them in a valid topological order. Nodes that do
//! not depend on any differentiable leaf carry no closure and are skipped.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Zip};

use crate::scalar::Scalar;

type Value<T> = Arc<ArrayD<T>>;
type Backward<T> = Box<dyn Fn(&ArrayD<T>, &[bool]) -> Vec<Option<ArrayD<T>>>>;

struct Node<T> {
    value: Value<T>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by node id.
pub struct Grads<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn to2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    let last = *a.shape().last().expect("rank >= 1");
    let rows = a.len() / last.max(1);
    a.view()
        .into_shape_with_order((rows, last))
        .expect("standard layout")
}

fn std_layout<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, parents: Vec<usize>, backward: Option<Backward<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = backward.is_some() && parents.iter().any(|&p| nodes[p].backward.is_some());
        let node = Node {
            value: Arc::new(std_layout(value)),
            parents: if tracked { parents } else { Vec::new() },
            backward: if tracked { backward } else { None },
        };
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&self, value: ArrayD<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(std_layout(value)),
            parents: Vec::new(),
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant_shared(&self, value: Value<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Value<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let value = if value.is_standard_layout() {
            value
        } else {
            Arc::new(value.as_standard_layout().into_owned())
        };
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: Some(Box::new(|_, _| Vec::new())),
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Value<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a non-scalar node");
        *val.iter().next().expect("one element")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].backward.is_some()
    }

    /// Reverse sweep from a scalar output with seed gradient 1.
    pub fn backward(&self, output: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        let out_val = &nodes[output.0].value;
        grads[output.0] = Some(ArrayD::from_elem(out_val.raw_dim(), T::one()));
        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else { continue };
            if node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].backward.is_some())
                .collect();
            let pgrads = back(&g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Grads { grads }
    }

    fn unary(&self, x: Var, value: ArrayD<T>, back: impl Fn(&ArrayD<T>) -> ArrayD<T> + 'static) -> Var {
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, _| vec![Some(back(g))])),
        )
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let out = &*av + &*bv;
        self.push(out, vec![a.0, b.0], Some(Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let out = &*av - &*bv;
        self.push(out, vec![a.0, b.0], Some(Box::new(|g, _| vec![Some(g.clone()), Some(g.mapv(|v| -v))])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let out = &*av * &*bv;
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| g * &*bv),
                    need[1].then(|| g * &*av),
                ]
            })),
        )
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&self, a: Var, c: Value<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "mul_const shape mismatch");
        let out = &*av * &*c;
        self.unary(a, out, move |g| g * &*c)
    }

    pub fn scale(&self, a: Var, k: T) -> Var {
        let out = &*self.value(a) * k;
        self.unary(a, out, move |g| g * k)
    }

    pub fn add_scalar(&self, a: Var, k: T) -> Var {
        let out = &*self.value(a) + k;
        self.unary(a, out, |g| g.clone())
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(a, out, move |g| {
            let mut r = g.clone();
            Zip::from(&mut r).and(&*av).for_each(|r, &x| {
                if x <= T::zero() {
                    *r = T::zero();
                }
            });
            r
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let y = Arc::new(out.clone());
        self.unary(a, out, move |g| {
            let mut r = g.clone();
            Zip::from(&mut r).and(&*y).for_each(|r, &y| *r *= y * (T::one() - y));
            r
        })
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).mapv(T::exp);
        let y = Arc::new(out.clone());
        self.unary(a, out, move |g| g * &*y)
    }

    pub fn square(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x * x);
        self.unary(a, out, move |g| g * &*av * T::c(2.0))
    }

    /// Hard clamp; zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.max(lo).min(hi));
        self.unary(a, out, move |g| {
            let mut r = g.clone();
            Zip::from(&mut r).and(&*av).for_each(|r, &x| {
                if x < lo || x > hi {
                    *r = T::zero();
                }
            });
            r
        })
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let orig = av.shape().to_vec();
        let out = (*av)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        self.unary(a, out, move |g| {
            std_layout(g.clone())
                .into_shape_with_order(IxDyn(&orig))
                .expect("reshape back")
        })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&self, parts: &[Var]) -> Var {
        let vals: Vec<Value<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let ax = Axis(vals[0].ndim() - 1);
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(ax, &views).expect("concat_last shapes agree");
        let widths: Vec<usize> = vals.iter().map(|v| v.shape()[ax.0]).collect();
        self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g, need| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(need)
                    .map(|(&w, &n)| {
                        let r = n.then(|| {
                            g.slice_axis(ax, ndarray::Slice::from(start..start + w))
                                .to_owned()
                        });
                        start += w;
                        r
                    })
                    .collect()
            })),
        )
    }

    /// Columns `[start, start + len)` along the last axis.
    pub fn slice_last(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let ax = Axis(av.ndim() - 1);
        let out = av.slice_axis(ax, ndarray::Slice::from(start..start + len)).to_owned();
        let shape = av.raw_dim();
        self.unary(a, out, move |g| {
            let mut r = ArrayD::zeros(shape.clone());
            r.slice_axis_mut(ax, ndarray::Slice::from(start..start + len))
                .assign(g);
            r
        })
    }

    /// Repeats a rank-1 node as `rows` identical rows.
    pub fn tile_rows(&self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 1, "tile_rows expects a vector");
        let n = av.len();
        let out = av
            .broadcast(IxDyn(&[rows, n]))
            .expect("broadcast")
            .to_owned();
        self.unary(a, out, |g| g.sum_axis(Axis(0)))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[]), av.sum());
        self.unary(a, out, move |g| {
            ArrayD::from_elem(shape.clone(), *g.iter().next().expect("scalar"))
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sum over the last axis.
    pub fn sum_last(&self, a: Var) -> Var {
        let av = self.value(a);
        let ax = Axis(av.ndim() - 1);
        let shape = av.raw_dim();
        let out = av.sum_axis(ax);
        self.unary(a, out, move |g| {
            g.clone()
                .insert_axis(ax)
                .broadcast(shape.clone())
                .expect("broadcast")
                .to_owned()
        })
    }

    // ---- linear algebra ----------------------------------------------------

    /// `x @ w` over the last axis of `x`; `w` is `[in, out]`.
    pub fn matmul(&self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("matmul weight is 2-d");
        let x2 = to2(&xv);
        assert_eq!(x2.ncols(), w2.nrows(), "matmul inner dimension");
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().expect("rank") = w2.ncols();
        let out = x2.dot(&w2).into_dyn().into_shape_with_order(IxDyn(&out_shape)).expect("shape");
        self.push(
            out,
            vec![x.0, w.0],
            Some(Box::new(move |g, need| {
                let g2 = to2(g);
                let w2 = wv.view().into_dimensionality::<Ix2>().expect("2-d");
                let gx = need[0].then(|| {
                    g2.dot(&w2.t())
                        .into_dyn()
                        .into_shape_with_order(xv.raw_dim())
                        .expect("shape")
                });
                let gw = need[1].then(|| to2(&xv).t().dot(&g2).into_dyn());
                vec![gx, gw]
            })),
        )
    }

    /// Adds a rank-1 bias along the last axis.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.ndim(), 1);
        assert_eq!(*xv.shape().last().expect("rank"), bv.len(), "bias width");
        let out = &*xv + &*bv;
        self.push(
            out,
            vec![x.0, b.0],
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| to2(g).sum_axis(Axis(0)).into_dyn()),
                ]
            })),
        )
    }

    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    /// 1-d convolution over the token axis.
    ///
    /// `x` is `[batch, tokens, c_in]`, `w` is `[kernel, c_in, c_out]`, `b` is
    /// `[c_out]`; output tokens are `(tokens + 2*pad - kernel) / stride + 1`.
    pub fn conv1d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let x3 = xv.view().into_dimensionality::<Ix3>().expect("conv1d input is 3-d");
        let w3 = wv.view().into_dimensionality::<Ix3>().expect("conv1d weight is 3-d");
        let (batch, tokens, c_in) = x3.dim();
        let (kernel, wc_in, c_out) = w3.dim();
        assert_eq!(c_in, wc_in, "conv1d channel mismatch");
        assert!(tokens + 2 * pad >= kernel);
        let t_out = (tokens + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom { batch, tokens, t_out, c_in, c_out, kernel, stride, pad };
        let mut out = Array3::<T>::zeros((batch, t_out, c_out));
        for k in 0..kernel {
            let xk = geom.gather(&x3, k);
            let y = xk.dot(&w3.index_axis(Axis(0), k));
            out += &y.into_shape_with_order((batch, t_out, c_out)).expect("shape");
        }
        out += &bv.view().into_dimensionality::<ndarray::Ix1>().expect("bias 1-d");
        self.push(
            out.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, need| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d");
                let g2 = g3
                    .to_shape((geom.batch * geom.t_out, geom.c_out))
                    .expect("shape");
                let x3 = xv.view().into_dimensionality::<Ix3>().expect("3-d");
                let w3 = wv.view().into_dimensionality::<Ix3>().expect("3-d");
                let mut gx = need[0].then(|| Array3::<T>::zeros((geom.batch, geom.tokens, geom.c_in)));
                let mut gw = need[1].then(|| Array3::<T>::zeros((geom.kernel, geom.c_in, geom.c_out)));
                for k in 0..geom.kernel {
                    if let Some(gw) = gw.as_mut() {
                        let xk = geom.gather(&x3, k);
                        gw.index_axis_mut(Axis(0), k).assign(&xk.t().dot(&g2));
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxk = g2.dot(&w3.index_axis(Axis(0), k).t());
                        geom.scatter_add(gx, &gxk, k);
                    }
                }
                let gb = need[2].then(|| g2.sum_axis(Axis(0)).into_dyn());
                vec![gx.map(|a| a.into_dyn()), gw.map(|a| a.into_dyn()), gb]
            })),
        )
    }

    /// Transposed 1-d convolution, the adjoint of [`Tape::conv1d`] with the
    /// same geometry. Output tokens are `(tokens - 1) * stride - 2*pad + kernel`.
    pub fn conv_transpose1d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let x3 = xv.view().into_dimensionality::<Ix3>().expect("input is 3-d");
        let w3 = wv.view().into_dimensionality::<Ix3>().expect("weight is 3-d");
        let (batch, tokens, c_in) = x3.dim();
        let (kernel, wc_in, c_out) = w3.dim();
        assert_eq!(c_in, wc_in, "conv_transpose1d channel mismatch");
        let t_out = (tokens - 1) * stride + kernel - 2 * pad;
        // In conv1d terms the roles swap: output positions index the input.
        let geom = ConvGeom { batch, tokens: t_out, t_out: tokens, c_in: c_out, c_out: c_in, kernel, stride, pad };
        let x2 = x3.to_shape((batch * tokens, c_in)).expect("shape").to_owned();
        let mut out = Array3::<T>::zeros((batch, t_out, c_out));
        for k in 0..kernel {
            let y = x2.dot(&w3.index_axis(Axis(0), k));
            geom.scatter_add(&mut out, &y, k);
        }
        out += &bv.view().into_dimensionality::<ndarray::Ix1>().expect("bias 1-d");
        self.push(
            out.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, need| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d");
                let w3 = wv.view().into_dimensionality::<Ix3>().expect("3-d");
                let x3 = xv.view().into_dimensionality::<Ix3>().expect("3-d");
                let x2 = x3.to_shape((geom.batch * geom.t_out, geom.c_out)).expect("shape");
                let mut gx = need[0].then(|| Array2::<T>::zeros((geom.batch * geom.t_out, geom.c_out)));
                let mut gw = need[1].then(|| Array3::<T>::zeros((geom.kernel, geom.c_out, geom.c_in)));
                for k in 0..geom.kernel {
                    let gk = geom.gather(&g3, k);
                    if let Some(gx) = gx.as_mut() {
                        *gx += &gk.dot(&w3.index_axis(Axis(0), k).t());
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw.index_axis_mut(Axis(0), k).assign(&x2.t().dot(&gk));
                    }
                }
                let gb = need[2].then(|| g3.sum_axis(Axis(0)).sum_axis(Axis(0)).into_dyn());
                vec![
                    gx.map(|a| {
                        a.into_shape_with_order((geom.batch, geom.t_out, geom.c_out))
                            .expect("shape")
                            .into_dyn()
                    }),
                    gw.map(|a| a.into_dyn()),
                    gb,
                ]
            })),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let x2 = to2(&xv);
        let (rows, width) = x2.dim();
        let n = T::c(width as f64);
        let mut xhat = Array2::<T>::zeros((rows, width));
        let mut inv_std = vec![T::zero(); rows];
        for (r, row) in x2.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            xhat.row_mut(r).assign(&row.mapv(|v| (v - mean) * is));
        }
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().expect("gain 1-d").to_owned();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("bias 1-d");
        let out = (&xhat * &g1 + &b1)
            .into_dyn()
            .into_shape_with_order(xv.raw_dim())
            .expect("shape");
        let shape = xv.raw_dim();
        self.push(
            out,
            vec![x.0, gain.0, bias.0],
            Some(Box::new(move |g, need| {
                let g2 = to2(g);
                let gx = need[0].then(|| {
                    let mut gx = Array2::<T>::zeros((rows, width));
                    for r in 0..rows {
                        let dxhat = &g2.row(r) * &g1;
                        let xh = xhat.row(r);
                        let m1 = dxhat.sum() / n;
                        let m2 = (&dxhat * &xh).sum() / n;
                        let is = inv_std[r];
                        Zip::from(gx.row_mut(r))
                            .and(&dxhat)
                            .and(xh)
                            .for_each(|o, &d, &h| *o = is * (d - m1 - h * m2));
                    }
                    gx.into_dyn().into_shape_with_order(shape.clone()).expect("shape")
                });
                let gg = need[1].then(|| (&g2 * &xhat).sum_axis(Axis(0)).into_dyn());
                let gb = need[2].then(|| g2.sum_axis(Axis(0)).into_dyn());
                vec![gx, gg, gb]
            })),
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch, tq, c]`, `k` and `v` are `[batch, tk, c]`; channels are
    /// split evenly into `heads`. Returns the attended values `[batch, tq, c]`
    /// and the attention weights `[batch, heads, tq, tk]` (rows sum to one).
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> (Var, Arc<ArrayD<T>>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let q3 = qv.view().into_dimensionality::<Ix3>().expect("q 3-d");
        let k3 = kv.view().into_dimensionality::<Ix3>().expect("k 3-d");
        let v3 = vv.view().into_dimensionality::<Ix3>().expect("v 3-d");
        let (batch, tq, c) = q3.dim();
        let tk = k3.dim().1;
        assert_eq!(c % heads, 0, "channels divisible by heads");
        let dh = c / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut weights = ndarray::Array4::<T>::zeros((batch, heads, tq, tk));
        let mut out = Array3::<T>::zeros((batch, tq, c));
        for bi in 0..batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q3.slice(s![bi, .., cols.clone()]);
                let kh = k3.slice(s![bi, .., cols.clone()]);
                let vh = v3.slice(s![bi, .., cols.clone()]);
                let mut a = qh.dot(&kh.t()) * scale;
                softmax_rows(&mut a);
                out.slice_mut(s![bi, .., cols]).assign(&a.dot(&vh));
                weights.slice_mut(s![bi, h, .., ..]).assign(&a);
            }
        }
        let weights = Arc::new(weights.into_dyn());
        let w_keep = weights.clone();
        let var = self.push(
            out.into_dyn(),
            vec![q.0, k.0, v.0],
            Some(Box::new(move |g, need| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d");
                let q3 = qv.view().into_dimensionality::<Ix3>().expect("3-d");
                let k3 = kv.view().into_dimensionality::<Ix3>().expect("3-d");
                let v3 = vv.view().into_dimensionality::<Ix3>().expect("3-d");
                let w4 = w_keep.view().into_dimensionality::<ndarray::Ix4>().expect("4-d");
                let mut gq = Array3::<T>::zeros((batch, tq, c));
                let mut gk = Array3::<T>::zeros((batch, tk, c));
                let mut gv = Array3::<T>::zeros((batch, tk, c));
                for bi in 0..batch {
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        let a = w4.slice(s![bi, h, .., ..]);
                        let go = g3.slice(s![bi, .., cols.clone()]);
                        let vh = v3.slice(s![bi, .., cols.clone()]);
                        gv.slice_mut(s![bi, .., cols.clone()]).assign(&a.t().dot(&go));
                        let ga = go.dot(&vh.t());
                        let mut gs = &ga * &a;
                        for (mut row, arow) in gs.rows_mut().into_iter().zip(a.rows()) {
                            let dot = row.sum();
                            Zip::from(&mut row).and(arow).for_each(|r, &p| *r -= p * dot);
                        }
                        gs *= scale;
                        let qh = q3.slice(s![bi, .., cols.clone()]);
                        let kh = k3.slice(s![bi, .., cols.clone()]);
                        gq.slice_mut(s![bi, .., cols.clone()]).assign(&gs.dot(&kh));
                        gk.slice_mut(s![bi, .., cols]).assign(&gs.t().dot(&qh));
                    }
                }
                vec![
                    need[0].then(|| gq.into_dyn()),
                    need[1].then(|| gk.into_dyn()),
                    need[2].then(|| gv.into_dyn()),
                ]
            })),
        );
        (var, weights)
    }

    /// Per-row cross-entropy of `[batch, classes]` logits against integer
    /// labels, through a stable log-softmax. Returns `[batch]` losses.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let l2 = lv.view().into_dimensionality::<Ix2>().expect("logits 2-d").to_owned();
        assert_eq!(l2.nrows(), labels.len());
        let mut probs = l2.clone();
        softmax_rows(&mut probs);
        let losses: Vec<T> = l2
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row) - row[y])
            .collect();
        let labels = labels.to_vec();
        self.push(
            ndarray::Array1::from(losses).into_dyn(),
            vec![logits.0],
            Some(Box::new(move |g, _| {
                let gs: Vec<T> = g.iter().copied().collect();
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl[[r, y]] -= T::one();
                    let gr = gs[r];
                    gl.row_mut(r).mapv_inplace(|v| v * gr);
                }
                vec![Some(gl.into_dyn())]
            })),
        )
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    tokens: usize,
    t_out: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.tokens).then_some(pos as usize)
    }

    /// Rows of `x` feeding kernel tap `k`, as `[batch * t_out, c_in]`.
    fn gather<T: Scalar>(&self, x: &ndarray::ArrayView3<T>, k: usize) -> Array2<T> {
        let mut out = Array2::<T>::zeros((self.batch * self.t_out, self.c_in));
        for b in 0..self.batch {
            for t in 0..self.t_out {
                if let Some(src) = self.source(t, k) {
                    out.row_mut(b * self.t_out + t).assign(&x.slice(s![b, src, ..]));
                }
            }
        }
        out
    }

    /// Adjoint of [`ConvGeom::gather`].
    fn scatter_add<T: Scalar>(&self, x: &mut Array3<T>, rows: &Array2<T>, k: usize) {
        for b in 0..self.batch {
            for t in 0..self.t_out {
                if let Some(dst) = self.source(t, k) {
                    let mut target = x.slice_mut(s![b, dst, ..]);
                    target += &rows.row(b * self.t_out + t);
                }
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Scalar>(row: ndarray::ArrayView1<T>) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn softmax_rows<T: Scalar>(a: &mut Array2<T>) {
    for mut row in a.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}
