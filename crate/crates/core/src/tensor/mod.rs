//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle to an immutable node. Operations on tensors
//! that need gradients record their inputs and a [`Backward`] rule; tensors
//! built only from constants record nothing, which is how frozen models and
//! teacher forward passes run without a tape.
//!
//! Broadcasting is limited to a right operand that is either a scalar or whose
//! shape is a suffix of the left operand's shape (e.g. a `[D]` bias added to a
//! `[T, D]` activation).

mod ops;
mod nn_ops;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{dim_err, Result};

pub use nn_ops::{depthwise_conv1d, layer_norm, rel_gather, rel_scatter, softmax_lastaxis};
pub use ops::{elementwise, matmul, ElementwiseOp};
pub use params::{Bound, Grads, ParamStore};

/// Gradient rule for a recorded operation.
pub trait Backward {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each parent, in parent order. `None` means
    /// "no contribution" and is always acceptable for parents that do not
    /// require gradients.
    fn backward(&self, parents: &[Tensor], out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    op: Option<Box<dyn Backward>>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            op: None,
        }))
    }

    /// Constant tensor. Panics if `data.len()` differs from the shape's volume.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::try_new(data, shape, false).expect("tensor data does not match shape")
    }

    /// Leaf tensor that collects gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::try_new(data, shape, true).expect("tensor data does not match shape")
    }

    pub fn try_new(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} has a zero-length axis"));
        }
        if data.len() != numel(shape) {
            return Err(dim_err!("{} values cannot fill shape {shape:?}", data.len()));
        }
        Ok(Self::build(data, shape.to_vec(), requires_grad))
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(vec![v], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        op: impl Backward + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::build(data, shape, false);
        }
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad: true,
            grad: RefCell::new(None),
            parents,
            op: Some(Box::new(op)),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false)
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.name())
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a one-element tensor. Gradients are added to
    /// whatever each reachable tensor already holds.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(dim_err!("backward needs a scalar root, got shape {:?}", self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let tape = Tape::record(self);
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);
        for node in tape.nodes.iter().rev() {
            let Some(grad) = pending.remove(&node.key()) else { continue };
            if let Some(op) = &node.0.op {
                let parent_grads = op.backward(&node.0.parents, node, &grad);
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel(), "{} gradient size", op.name());
                    match pending.get_mut(&parent.key()) {
                        Some(acc) => add_assign(acc, &pg),
                        None => {
                            pending.insert(parent.key(), pg);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => add_assign(acc, &grad),
                None => *slot = Some(grad),
            }
        }
        Ok(())
    }
}

pub(crate) fn add_assign(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

/// Topologically ordered record of the operations reachable from a root.
/// Every node appears after all of its inputs.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Tape {
        let mut nodes = Vec::new();
        let mut visited = HashSet::new();
        // iterative post-order DFS; deep stacks of layers would overflow recursion
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                nodes.push(t);
                continue;
            }
            if !t.requires_grad() || !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }

    /// Checks that every recorded input precedes its consumer.
    pub fn is_topological(&self) -> bool {
        let pos: HashMap<usize, usize> =
            self.nodes.iter().enumerate().map(|(i, t)| (t.key(), i)).collect();
        self.nodes.iter().enumerate().all(|(i, t)| {
            t.0.parents
                .iter()
                .filter(|p| p.requires_grad())
                .all(|p| pos.get(&p.key()).is_some_and(|&j| j < i))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let x = Tensor::param(vec![3.0], &[1]);
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_accumulates() {
        let x = Tensor::param(vec![1.5, -2.0], &[2]);
        let loss = x.square().sum_all();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]);
        assert!(matches!(x.sigmoid().backward(), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn dead_branch_gets_zero() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]);
        let unused = Tensor::param(vec![5.0], &[1]);
        let _dead = unused.exp();
        let loss = x.sum_all().add(&unused.scale(0.0)).unwrap();
        loss.backward().unwrap();
        assert_eq!(unused.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn tape_is_topological() {
        let a = Tensor::param(vec![0.3, 0.1, -0.4, 0.9], &[2, 2]);
        let b = Tensor::param(vec![1.0, 2.0], &[2]);
        let h = a.add(&b).unwrap().sigmoid();
        let loss = h.mul(&a).unwrap().add(&h).unwrap().sum_all();
        let tape = Tape::record(&loss);
        assert!(tape.is_topological());
        assert_eq!(tape.nodes().last().unwrap().key(), loss.key());
        // a, b, add, sigmoid, mul, add, sum
        assert_eq!(tape.len(), 7);
    }

    #[test]
    fn constants_record_nothing() {
        let a = Tensor::new(vec![1.0, 2.0], &[2]);
        let y = a.exp().sum_all();
        assert!(!y.requires_grad());
        assert!(y.op_name().is_none());
    }
}
