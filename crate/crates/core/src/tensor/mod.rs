//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! `Tensor` is the storage type for model parameters; `Graph` records one
//! forward pass as a tape of ops and walks it backwards to fill gradients.
//! Everything is 64-bit: desk-scale models make speed a non-issue and the
//! tight float width keeps finite-difference checks meaningful.

mod gradcheck;
mod graph;
mod optim;

pub use gradcheck::{grad_check, numeric_grad};
pub use graph::{Graph, Var};
pub use optim::AdamW;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Variance epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive mask value for blocked attention positions. Large enough that
/// `exp` underflows to exactly zero after max subtraction, yet finite so the
/// no-NaN/no-Inf invariant holds everywhere.
pub const ATTN_MASK_NEG: f64 = -1e9;

/// A dense row-major f64 array with an optional gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: true,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; numel],
            grad: None,
            requires_grad: true,
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("{} values for shape {:?}", data.len(), shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: true,
        })
    }

    /// Normal(0, std) initialization from a dedicated stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| gaussian(rng) * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Box-Muller; two uniform draws per normal sample keeps the stream layout
/// identical across platforms.
fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered, named collection of model parameters. Registration order is the
/// canonical order for initialization, serialization, and gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_all_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Fold a batch gradient buffer into the parameters' grad fields.
    pub fn accumulate(&mut self, grads: &GradBuf) {
        for (i, g) in grads.0.iter().enumerate() {
            if let Some(g) = g {
                self.tensors[i].accumulate_grad(g);
            }
        }
    }
}

/// Per-parameter gradient buffers produced by one or more backward passes.
#[derive(Debug, Clone)]
pub struct GradBuf(pub(crate) Vec<Option<Vec<f64>>>);

impl GradBuf {
    pub fn empty(n_params: usize) -> Self {
        GradBuf(vec![None; n_params])
    }

    /// Elementwise add, taking buffers from `other` where self has none.
    pub fn add_assign(&mut self, other: GradBuf) {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0[id.0].as_deref()
    }

    pub fn all_finite(&self) -> bool {
        self.0
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// One forward pass over a parameter store: binds parameters to graph leaves
/// on first use and reads their gradients back out after `backward`.
pub struct Session<'p> {
    pub g: Graph,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Session {
            g: Graph::new(),
            bound: vec![None; store.len()],
            store,
        }
    }

    /// Graph leaf for a parameter; bound once per session.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = self.g.leaf(t.data.clone(), &t.shape, t.requires_grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Collect accumulated leaf gradients for every bound parameter.
    pub fn take_grads(&self) -> GradBuf {
        let mut buf = GradBuf::empty(self.store.len());
        for (i, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if let Some(g) = self.g.grad(*v) {
                    buf.0[i] = Some(g.to_vec());
                }
            }
        }
        buf
    }
}
