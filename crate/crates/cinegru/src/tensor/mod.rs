//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable N-dimensional array node in a dynamically
//! recorded computation graph. Operations allocate a fresh node holding the
//! result; when an operand lies on a gradient path the node also records its
//! parents and a backward closure. [`Tensor::backward`] walks the recorded
//! graph once in reverse topological order and accumulates gradients onto
//! every reachable leaf that requires them.
//!
//! Two element types are supported: `f32` for training and `f64` for
//! finite-difference verification. Everything downstream (layers, models,
//! the training loop) is generic over [`Element`], so the exact same model
//! code can be gradient-checked at 64-bit and trained at 32-bit.
//!
//! Producing a NaN or infinity from finite inputs is a hard error: every
//! operation validates its output and panics with a `non-finite` message,
//! which the CLI maps to its numeric-error exit code.

mod conv;
mod ops;
pub mod gradcheck;
mod params;

pub use params::{read_parameter_container, write_parameter_container, ContainerError, ParameterSet};
pub(crate) use params::hex_string;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Scalar type a [`Tensor`] can hold.
pub trait Element:
    num_traits::Float
    + std::ops::AddAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Checkpoint files store 32-bit floats; see [`write_parameter_container`].
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;

    /// `C := A·B + beta·C` with explicit row/column strides (row-major data).
    ///
    /// # Safety
    /// The pointers must cover `m×k`, `k×n` and `m×n` elements under the
    /// given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Receives per-parent gradient contributions during a backward pass.
///
/// Gradients propagate through a pass-local map keyed by node id; leaves that
/// require gradients have the pass total added onto their persistent storage
/// at the end, so repeated backward calls accumulate additively.
pub struct GradSink<E: Element> {
    map: HashMap<u64, Vec<E>>,
}

impl<E: Element> GradSink<E> {
    fn new() -> Self {
        GradSink { map: HashMap::new() }
    }

    /// Add `contribution` to the pass-local gradient of `target`.
    /// Contributions to tensors off the gradient path are dropped.
    pub fn add(&mut self, target: &Tensor<E>, contribution: &[E]) {
        if !target.requires_grad() {
            return;
        }
        debug_assert_eq!(contribution.len(), target.numel());
        let entry = self
            .map
            .entry(target.id())
            .or_insert_with(|| vec![E::zero(); contribution.len()]);
        for (dst, &src) in entry.iter_mut().zip(contribution) {
            *dst += src;
        }
    }

    fn take(&mut self, id: u64) -> Option<Vec<E>> {
        self.map.remove(&id)
    }
}

type BackwardFn<E> = Box<dyn Fn(&[E], &mut GradSink<E>)>;

struct Node<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    /// Persistent gradient storage; populated on leaves only.
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: Cell<bool>,
    /// Gradient-requiring parents, in operand order; drives the topological walk.
    parents: Vec<Tensor<E>>,
    backward_fn: Option<BackwardFn<E>>,
}

/// A node in the computation graph. Cheap to clone (shared handle).
pub struct Tensor<E: Element> {
    node: Rc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad.get())
            .finish()
    }
}

pub(crate) fn check_finite<E: Element>(op: &str, data: &[E]) {
    if !data.iter().all(|v| v.is_finite()) {
        panic!("non-finite value produced by `{op}`");
    }
}

impl<E: Element> Tensor<E> {
    fn alloc(
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        parents: Vec<Tensor<E>>,
        backward_fn: Option<BackwardFn<E>>,
    ) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "element count {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&d| d > 0), "zero extent in shape {shape:?}");
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents,
                backward_fn,
            }),
        }
    }

    /// Constant leaf tensor.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Self {
        check_finite("from_vec", &data);
        Self::alloc(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Leaf tensor participating in gradient computation.
    pub fn param(data: Vec<E>, shape: &[usize]) -> Self {
        check_finite("param", &data);
        Self::alloc(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![E::zero(); shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: E) -> Self {
        Self::from_vec(vec![value], &[1])
    }

    /// Interior node produced by an operation. `parents` lists the
    /// gradient-requiring operands; the result requires a gradient exactly
    /// when that list is non-empty.
    pub(crate) fn from_op(
        op: &str,
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward_fn: BackwardFn<E>,
    ) -> Self {
        check_finite(op, &data);
        if parents.is_empty() {
            Self::alloc(shape, data, false, Vec::new(), None)
        } else {
            Self::alloc(shape, data, true, parents, Some(backward_fn))
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Toggle gradient participation of a leaf (used to freeze parameters).
    pub fn set_requires_grad(&self, value: bool) {
        assert!(
            self.node.backward_fn.is_none(),
            "requires_grad can only be toggled on leaf tensors"
        );
        self.node.requires_grad.set(value);
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward_fn.is_none()
    }

    /// Accumulated gradient, if any backward pass has reached this leaf.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.borrow().clone()
    }

    /// Accumulated gradient, or zeros for untouched leaves. Parameters that
    /// are unreachable from a loss therefore report a zero gradient.
    pub fn grad_or_zeros(&self) -> Vec<E> {
        self.grad().unwrap_or_else(|| vec![E::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values in place. The shape is fixed; this exists
    /// for optimizer updates and checkpoint loading on leaf tensors.
    pub fn set_data(&self, data: &[E]) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        check_finite("set_data", data);
        self.node.data.borrow_mut().copy_from_slice(data);
    }

    /// Apply `f` to the stored values in place (optimizer steps).
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        let mut data = self.node.data.borrow_mut();
        f(&mut data);
        check_finite("update_data", &data);
    }

    /// Reverse-mode differentiation from a scalar.
    ///
    /// Gradients of repeated calls accumulate additively on leaves. The
    /// recorded graph is kept alive by the tensors themselves, so a second
    /// call without `zero_grad` doubles every leaf gradient.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.shape()
        );
        if !self.requires_grad() {
            return;
        }

        // Iterative post-order DFS over gradient-requiring parents. The
        // traversal order is a pure function of the graph, so gradient
        // accumulation order (and thus the floating-point result) is
        // reproducible run to run.
        let mut topo: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            if child < node.node.parents.len() {
                stack.push((node.clone(), child + 1));
                let parent = node.node.parents[child].clone();
                if visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }

        let mut sink = GradSink::new();
        sink.map.insert(self.id(), vec![E::one()]);
        for node in topo.iter().rev() {
            let Some(grad) = sink.take(node.id()) else { continue };
            match &node.node.backward_fn {
                Some(backward) => backward(&grad, &mut sink),
                None => {
                    // Leaf: fold the pass-local total into persistent storage.
                    let mut slot = node.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(existing) => {
                            for (dst, src) in existing.iter_mut().zip(&grad) {
                                *dst += *src;
                            }
                        }
                        None => *slot = Some(grad),
                    }
                }
            }
        }
    }
}

/// Assert two shapes match, naming the operation and both shapes.
pub(crate) fn expect_same_shape<E: Element>(op: &str, a: &Tensor<E>, b: &Tensor<E>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: operand shapes differ: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}
