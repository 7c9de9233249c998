//! Named parameter tensors.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Grads, Tape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<ArrayD<T>>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub enum Init {
    Zeros,
    Ones,
    /// Glorot-uniform with the given fan-in and fan-out.
    Glorot { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let dim = IxDyn(shape);
        let tensor = match init {
            Init::Zeros => ArrayD::zeros(dim),
            Init::Ones => ArrayD::ones(dim),
            Init::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                ArrayD::from_shape_simple_fn(dim, || T::c(rng.random_range(-limit..limit)))
            }
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).expect("valid std");
                ArrayD::from_shape_simple_fn(dim, || T::c(normal.sample(rng)))
            }
        };
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.tensors[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<ArrayD<T>> {
        self.tensors[id.0].clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        let id = self.find(name)?;
        Some(self.get_mut(id))
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<T>) {
        assert_eq!(value.shape(), self.tensors[id.0].shape(), "shape of {}", self.names[id.0]);
        self.tensors[id.0] = Arc::new(value);
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Arc::new(ArrayD::zeros(t.raw_dim())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Arc::new(t.mapv(|v| U::c(v.to_f64_lossy()))))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Registers every tensor on the tape as a differentiable leaf.
    pub fn leaves(&self, tape: &Tape<T>) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Registers every tensor as a constant, for passes that need no gradient.
    pub fn constants(&self, tape: &Tape<T>) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|t| tape.constant_shared(t.clone())).collect(),
        }
    }

    /// Collects leaf gradients; unused parameters get zeros.
    pub fn collect_grads(&self, vars: &ParamVars, grads: &mut Grads<T>) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .zip(&vars.vars)
                .map(|(t, &v)| Arc::new(grads.take(v).unwrap_or_else(|| ArrayD::zeros(t.raw_dim()))))
                .collect(),
        }
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<ArrayD<T>>) -> Self {
        Self {
            names,
            tensors: tensors.into_iter().map(Arc::new).collect(),
        }
    }
}

/// Tape handles for every parameter of a store.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Standard-normal noise of the given shape.
pub fn standard_normal<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let v: f64 = StandardNormal.sample(rng);
        T::c(v)
    })
}
