//! Minimal reverse-mode differentiable tensor kernel.
//!
//! A [`Tensor`] is a reference-counted node in a dynamically built graph.
//! Every operation records a backward closure that maps the output gradient
//! onto its parents; [`Tensor::backward`] replays those closures in reverse
//! topological order and accumulates into every `requires_grad` leaf.
//!
//! Values are `f32`, row-major. Only the operations the network needs exist.

mod conv;
mod gradcheck;
mod linalg;
mod norm;
mod ops;
mod serialize;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{arg_err, shape_err, Error, Result};

pub use conv::ConvSpec;
pub use gradcheck::{
    finite_diff_grad, finite_diff_grad_at, max_relative_error, relative_error, REL_ERR_FLOOR,
};
pub use norm::{BatchNormMode, RunningStats, BN_MOMENTUM, NORM_EPS};
pub use ops::{Activation, GATHER_PAD};
pub use serialize::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, TENSOR_MAGIC};

thread_local! {
    static CHECKED: Cell<bool> = const { Cell::new(false) };
    static NO_GRAD: Cell<u32> = const { Cell::new(0) };
}

/// Enables or disables finiteness checks on every op output (per thread).
pub fn set_checked_mode(on: bool) {
    CHECKED.with(|c| c.set(on));
}

pub fn checked_mode() -> bool {
    CHECKED.with(|c| c.get())
}

/// While alive, ops record no graph edges on this thread.
pub struct NoGradGuard(());

impl NoGradGuard {
    pub fn new() -> Self {
        NO_GRAD.with(|c| c.set(c.get() + 1));
        NoGradGuard(())
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|c| c.set(c.get() - 1));
    }
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|c| c.get() == 0)
}

type BackwardFn = Box<dyn Fn(&[f32])>;

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// N-dimensional `f32` array participating in the autodiff graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f32> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(shape_err("tensor", format!("zero-sized dim in {shape:?}")));
    }
    if numel(shape) != len {
        return Err(shape_err(
            "tensor",
            format!("shape {shape:?} needs {} values, got {len}", numel(shape)),
        ));
    }
    Ok(())
}

impl Tensor {
    /// Constant (no gradient) tensor.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        validate_shape(shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn parameter(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        validate_shape(shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::new(vec![value; numel(shape)], shape).expect("full: invalid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Self::leaf(vec![value], Vec::new(), false)
    }

    fn leaf(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Builds an op output. Records the backward closure only when some
    /// parent needs a gradient and grad mode is on.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: &[&Tensor],
        backward: impl Fn(&[f32]) + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: shape/data mismatch");
        if checked_mode() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = if track {
            Node {
                shape,
                data: RefCell::new(data),
                requires_grad: true,
                grad: RefCell::new(None),
                parents: parents.iter().map(|&p| p.clone()).collect(),
                backward: Some(Box::new(backward)),
            }
        } else {
            Node {
                shape,
                data: RefCell::new(data),
                requires_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }
        };
        Ok(Tensor(Rc::new(node)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Meant for optimizers and buffers;
    /// never mutate a tensor while a graph that read it is still pending backward.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.data().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("tensor"))
        }
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode accumulation from a scalar loss into every leaf that
    /// requires a gradient. Intermediate gradients are released afterwards.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalar(self.0.shape.clone()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let grad = node.0.grad.borrow_mut().take();
            if let Some(g) = grad {
                backward(&g);
            }
        }
        Ok(())
    }

    // Iterative post-order DFS; parents are visited in recorded order so the
    // resulting order, and hence the accumulation order, is deterministic.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.0));
        while let Some((node, next)) = stack.pop() {
            if next < node.0.parents.len() {
                let parent = node.0.parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && visited.insert(Rc::as_ptr(&parent.0)) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(shape_err(
                op,
                format!("expected rank {rank}, got shape {:?}", self.shape()),
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_positive(op: &'static str, name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(arg_err(op, format!("{name} must be positive")))
    } else {
        Ok(())
    }
}
