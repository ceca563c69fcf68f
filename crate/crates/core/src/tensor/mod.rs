//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a flat row-major buffer plus shape. Operations on tensors
//! that require gradients record a node (operation + parent handles); calling
//! [`backward`] on a scalar loss walks the recorded graph in reverse
//! topological order and accumulates gradients into every reachable leaf.
//!
//! Graph lifetime: one forward pass builds one graph, one `backward` consumes
//! it. Parameters live in a [`ParamStore`] and persist across graphs.

mod backward;
mod gradcheck;
mod ops;

pub use backward::backward;
pub use gradcheck::{gradcheck, GradCheckReport};
pub use ops::{
    bce_sum_loss, concat_cols, cosine_similarity, scaled_dot_attention, stack_rows,
    AttentionResult,
};

use backward::Node;
use indexmap::IndexMap;
use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("softmax axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward called twice on the same graph without a fresh forward")]
    GraphConsumed,
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("bce_sum_loss target is not one-hot: {reason}")]
    TargetNotOneHot { reason: String },
    #[error("forward pass is not deterministic: two evaluations differ")]
    NonDeterministic,
    #[error("shape {shape:?} does not match data length {len}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("parameter {name:?} already registered")]
    DuplicateParam { name: String },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
    consumed: Cell<bool>,
}

/// Handle to a tensor; clones share the same buffer and graph node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node,
                consumed: Cell::new(false),
            }),
        }
    }

    /// Non-differentiable leaf.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor; set `requires_grad` to make it a gradient target.
    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor, TensorError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::BadShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::new_inner(data, shape.to_vec(), requires_grad, None))
    }

    /// Rank-1 constant.
    pub fn vector(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Self::new_inner(data, vec![n], false, None)
    }

    /// Scalar constant, shape `[1]`.
    pub fn scalar(x: f64) -> Tensor {
        Self::new_inner(vec![x], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::new_inner(vec![0.0; n], shape.to_vec(), false, None)
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, node: Node) -> Tensor {
        let requires_grad = node.parents.iter().any(|p| p.requires_grad());
        // Detached subgraphs need no graph bookkeeping.
        let node = if requires_grad { Some(node) } else { None };
        Self::new_inner(data, shape, requires_grad, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.data.borrow()[0]
    }

    /// Gradient accumulated by the last backward pass, if this is a leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the buffer in place (parameter updates, checkpoint load).
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    /// In-place `x -= scale * delta`, used by optimizers.
    pub fn axpy(&self, scale: f64, delta: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), delta.len(), "axpy length mismatch");
        for (x, g) in d.iter_mut().zip(delta) {
            *x -= scale * g;
        }
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    pub(crate) fn accumulate_leaf_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

/// Gradients keyed by parameter name, as produced by [`backward`].
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    entries: IndexMap<String, Vec<f64>>,
}

impl GradientMap {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub(crate) fn insert(&mut self, name: String, grad: Vec<f64>) {
        self.entries.insert(name, grad);
    }

    /// True if every gradient entry is finite.
    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Named parameter registry; iteration follows registration order.
#[derive(Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a fresh trainable leaf under `name`.
    pub fn register(
        &mut self,
        name: &str,
        data: Vec<f64>,
        shape: &[usize],
    ) -> Result<Tensor, TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let t = Tensor::leaf(data, shape, true)?;
        self.params.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }
}
