//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap, reference-counted handle. Every operation that
//! has at least one gradient-tracking input records a [`GraphNode`] holding
//! its parents and whatever it needs for the backward pass; the graph is
//! dropped together with the last handle to its root.

mod conv;
mod gemm;
mod loss;
mod ops;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use conv::{conv2d, maxpool2d, upsample_nn};
pub use loss::{class_cross_entropy, weighted_pixel_bce, LOG_CLAMP};
pub use ops::{add, concat_channels, dense, dropout, mul, relu, reshape, sigmoid, softmax, sum};

#[derive(Clone)]
pub struct Tensor(Rc<TensorInner>);

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<GraphNode>,
}

pub struct GraphNode {
    op: Op,
    parents: Vec<Tensor>,
}

/// Operation tag plus the context saved for its backward pass.
pub(crate) enum Op {
    Add,
    Mul,
    Sum,
    Reshape,
    ConcatChannels { split: usize },
    Conv2d { stride: usize, padding: usize },
    MaxPool { argmax: Vec<usize> },
    Upsample { factor: usize },
    Dense,
    Relu,
    Dropout { scale: Vec<f64> },
    Sigmoid,
    Softmax,
    WeightedBce { weight_sum: f64 },
    ClassCrossEntropy { labels: Vec<usize> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Sum => "sum",
            Op::Reshape => "reshape",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Upsample { .. } => "upsample_nn",
            Op::Dense => "dense",
            Op::Relu => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::WeightedBce { .. } => "weighted_pixel_bce",
            Op::ClassCrossEntropy { .. } => "class_cross_entropy",
        }
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape(format!("dimensions must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(format!(
            "shape {shape:?} holds {n} elements but {len} values were supplied"
        )));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<GraphNode>) -> Self {
        Tensor(Rc::new(TensorInner {
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates a gradient during [`Tensor::backward`].
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Result of an operation. A graph node is recorded only when some
    /// parent tracks gradients.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[&Tensor]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| GraphNode {
            op,
            parents: parents.iter().map(|&p| p.clone()).collect(),
        });
        Self::build(shape, data, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn op_tag(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op.tag())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same storage contents, detached from any graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    fn key(&self) -> *const TensorInner {
        Rc::as_ptr(&self.0)
    }

    /// Reachable gradient-tracking tensors in post-order (parents first).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut visited = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in node.parents.iter().filter(|p| p.requires_grad()) {
                    if !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
    /// calls; interior gradients are recomputed each time.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        for t in order.iter().filter(|t| !t.is_leaf()) {
            t.zero_grad();
        }
        self.accumulate_grad(&[1.0]);

        for t in order.iter().rev() {
            let Some(node) = &t.0.node else { continue };
            let grad = t.0.grad.borrow();
            let Some(g) = grad.as_ref() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
            let parent_grads = backward_op(&node.op, t, g, &node.parents, &needs);
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if let (Some(pg), true) = (pg, need) {
                    p.accumulate_grad(&pg);
                }
            }
        }
        Ok(())
    }
}

fn backward_op(op: &Op, out: &Tensor, g: &[f64], parents: &[Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Mul => {
            let (a, b) = (parents[0].data(), parents[1].data());
            vec![
                Some(g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                Some(g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::Sum => vec![Some(vec![g[0]; parents[0].numel()])],
        Op::Reshape => vec![Some(g.to_vec())],
        Op::ConcatChannels { split } => ops::concat_backward(parents, *split, g),
        Op::Conv2d { stride, padding } => conv::conv2d_backward(parents, *stride, *padding, out, g, needs),
        Op::MaxPool { argmax } => vec![Some(conv::maxpool_backward(parents[0].numel(), argmax, g))],
        Op::Upsample { factor } => vec![Some(conv::upsample_backward(&parents[0], *factor, g))],
        Op::Dense => ops::dense_backward(parents, g, needs),
        Op::Relu => {
            let x = parents[0].data();
            vec![Some(x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect())]
        }
        Op::Dropout { scale } => vec![Some(g.iter().zip(scale).map(|(g, s)| g * s).collect())],
        Op::Sigmoid => {
            let y = out.data();
            vec![Some(y.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect())]
        }
        Op::Softmax => vec![Some(ops::softmax_backward(out, g))],
        Op::WeightedBce { weight_sum } => loss::weighted_bce_backward(parents, *weight_sum, g[0]),
        Op::ClassCrossEntropy { labels } => loss::class_ce_backward(parents, labels, g[0]),
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_tag())
            .finish_non_exhaustive()
    }
}

impl fmt::Debug for GraphNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GraphNode")
            .field("op", &self.op.tag())
            .field("parents", &self.parents.len())
            .finish()
    }
}
