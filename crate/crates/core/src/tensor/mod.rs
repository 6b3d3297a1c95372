//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Operations on tensors
//! that require gradients record their inputs and a backward rule, building a
//! graph that [`Tensor::backward`] walks in reverse topological order. Graphs
//! live on one thread; leaves (parameters) keep their data and accumulated
//! gradient across passes.

mod kernels;
mod ops;
mod scalar;

pub mod gradcheck;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use kernels::gemm;
pub use scalar::{DType, Scalar};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

type BackwardFn<F> = Box<dyn Fn(&[F], &[bool]) -> Vec<Option<Vec<F>>>>;

struct Op<F: Scalar> {
    kind: &'static str,
    inputs: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Node<F: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    requires_grad: Cell<bool>,
    op: Option<Op<F>>,
}

pub struct Tensor<F: Scalar = f32>(Rc<Node<F>>);

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape)
            .field("dtype", &F::DTYPE)
            .field("requires_grad", &self.requires_grad());
        if let Some(op) = &self.0.op {
            d.field("op", &op.kind);
        }
        if data.len() <= 16 {
            d.field("data", &*data);
        }
        d.finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations for differentiation on this thread.
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

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    /// Leaf tensor from row-major data.
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Parameter(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::leaf(data, shape.to_vec()))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&x| F::from_f64(x)).collect(), shape)
    }

    pub fn scalar(x: F) -> Self {
        Self::leaf(vec![x], vec![1])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive");
        Self::leaf(vec![value; numel(shape)], shape.to_vec())
    }

    fn leaf(data: Vec<F>, shape: Vec<usize>) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            op: None,
        }))
    }

    /// Output of an operation. The backward rule is only retained when some
    /// input takes part in differentiation.
    pub(crate) fn from_op(
        kind: &'static str,
        data: Vec<F>,
        shape: Vec<usize>,
        inputs: &[&Tensor<F>],
        backward: impl Fn(&[F], &[bool]) -> Vec<Option<Vec<F>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let tracked = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let op = tracked.then(|| Op {
            kind,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(tracked),
            op,
        }))
    }

    /// Marks a leaf as trainable. Has no effect on operation outputs.
    pub fn requires_grad_(self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn set_requires_grad(&self, on: bool) {
        if self.0.op.is_none() {
            self.0.requires_grad.set(on);
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_kind(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.kind)
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

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Intended for leaves (parameter updates,
    /// loading weights); mutating an op output does not re-run its graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|x| x.as_f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<F>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, detached from any graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.0.shape.clone())
    }

    pub fn ptr_eq(&self, other: &Tensor<F>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node<F> {
        Rc::as_ptr(&self.0)
    }

    /// Accumulates d(self)/d(leaf) into every trainable leaf reachable from
    /// this scalar. Gradients add to whatever the leaves already hold.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node<F>, Vec<F>> = HashMap::new();
        pending.insert(self.key(), vec![F::one()]);

        for node in order.iter().rev() {
            let Some(grad_out) = pending.remove(&node.key()) else {
                continue;
            };
            let Some(op) = &node.0.op else {
                accumulate(&node.0.grad, &grad_out);
                continue;
            };
            let needs: Vec<bool> = op.inputs.iter().map(|t| t.requires_grad()).collect();
            let grads = (op.backward)(&grad_out, &needs);
            debug_assert_eq!(grads.len(), op.inputs.len(), "backward arity of {}", op.kind);
            for (input, g) in op.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), input.numel(), "gradient size in {}", op.kind);
                if input.is_leaf() {
                    accumulate(&input.0.grad, &g);
                } else {
                    match pending.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            pending.insert(input.key(), g);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Tracked nodes reachable from `self`, inputs before consumers.
    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<F>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for input in op.inputs.iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Number of recorded operations reachable from this tensor.
    pub fn graph_len(&self) -> usize {
        self.topo_order().iter().filter(|t| !t.is_leaf()).count()
    }
}

fn accumulate<F: Scalar>(slot: &RefCell<Option<Vec<F>>>, g: &[F]) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Index of the largest value in each row of a `[rows, cols]` tensor.
/// Ties go to the lowest index.
pub fn argmax_rows<F: Scalar>(t: &Tensor<F>) -> Vec<usize> {
    let cols = *t.shape().last().expect("rank >= 1");
    t.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
