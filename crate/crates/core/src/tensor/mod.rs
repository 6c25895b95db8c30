//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Every op that sees at least one operand with `requires_grad` records its
//! parents and a vector-Jacobian closure; the resulting graph is the tape.
//! [`Tensor::backward`] walks it once in reverse topological order and leaves
//! the accumulated gradient on every leaf that asked for one.
//!
//! Broadcasting rule for the binary elementwise ops (`add`, `sub`, `mul`,
//! `div`): the right operand either has the same shape as the left, has shape
//! `lhs.shape[1..]` (it is repeated along the leading axis), or holds a single
//! element. Nothing else broadcasts.

mod gradcheck;
mod io;
mod linalg;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, Error, Result};

pub use gradcheck::grad_check;
pub use io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, TENSOR_MAGIC};

/// Vector-Jacobian product: receives the output gradient and a flag per parent
/// telling whether that parent wants a gradient.
type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording anything on the tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    consumed: Cell<bool>,
}

/// Reference-counted handle to an immutable node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &Preview(&self.0.data))
            .finish()
    }
}

struct Preview<'a>(&'a [f64]);

impl fmt::Debug for Preview<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.len() <= 8 {
            write!(f, "{:?}", self.0)
        } else {
            write!(f, "{:?}.. ({} values)", &self.0[..8], self.0.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
            consumed: Cell::new(false),
        }))
    }

    /// Constant tensor; fails when the data length disagrees with the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(invalid(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor::make(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Leaf that accumulates a gradient during [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(t.requires_grad_(true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(shape.to_vec(), vec![0.0; numel(shape)], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::make(shape.to_vec(), vec![value; numel(shape)], false, Vec::new(), None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(Vec::new(), vec![value], false, Vec::new(), None)
    }

    pub fn from_slice(data: &[f64]) -> Tensor {
        Tensor::make(vec![data.len()], data.to_vec(), false, Vec::new(), None)
    }

    /// Fresh leaf sharing this tensor's values, with the requested grad flag.
    pub fn requires_grad_(&self, requires_grad: bool) -> Tensor {
        Tensor::make(
            self.0.shape.clone(),
            self.0.data.clone(),
            requires_grad,
            Vec::new(),
            None,
        )
    }

    /// Constant copy cut off from the tape.
    pub fn detach(&self) -> Tensor {
        self.requires_grad_(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().take();
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Records an op output. Parents that do not require grad never receive
    /// one; when no parent requires grad (or recording is off) the result is
    /// a constant and the closure is dropped.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<f64>, parents: &[&Tensor], f: F) -> Tensor
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        if grad_enabled() && parents.iter().any(|p| p.requires_grad()) {
            let parents = parents.iter().map(|&p| p.clone()).collect();
            Tensor::make(shape, data, true, parents, Some(Box::new(f)))
        } else {
            Tensor::make(shape, data, false, Vec::new(), None)
        }
    }

    /// Backpropagates from this scalar. Every `requires_grad` leaf reachable
    /// from it ends up holding d(self)/d(leaf), added to any gradient it
    /// already held.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::NoTape);
        }
        if self.0.consumed.replace(true) {
            return Err(Error::BackwardTwice);
        }

        let order = self.topological_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                Some(vjp) => {
                    let needs: Vec<bool> = node.0.parents.iter().map(Tensor::requires_grad).collect();
                    let parent_grads = vjp(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph (parents before children).
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, next)) = stack.pop() {
            if next < node.0.parents.len() {
                let parent = node.0.parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
