//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable node in a computation graph. Operations on
//! tensors that require gradients record their parents and a backward
//! closure; [`backward`] walks the graph in reverse topological order and
//! returns a [`GradientMap`] with one entry per reachable leaf.
//!
//! Leaves additionally accumulate their gradient in an internal buffer, so
//! repeated calls to [`backward`] without [`Tensor::zero_grad`] add up.

mod conv;
mod gradcheck;
mod ops;
mod stats;

pub use conv::Conv2dSpec;
pub use gradcheck::{grad_check, GradCheck};
pub use stats::{channel_stats, STD_EPS};

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{contract, Error, Result};

/// Computes parent gradients from the output gradient, the parents and the
/// output value. Entries for parents that do not need a gradient may be `None`.
pub type BackwardFn =
    Box<dyn Fn(&[f64], &[Tensor], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    grad: Mutex<Option<Vec<f64>>>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
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

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            parents,
            backward,
            grad: Mutex::new(None),
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::validate(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), false, Vec::new(), None))
    }

    /// Leaf tensor that accumulates gradient.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::validate(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), true, Vec::new(), None))
    }

    fn validate(data: &[f64], shape: &[usize]) -> Result<()> {
        if shape.iter().any(|&e| e == 0) {
            return Err(contract(format!("tensor extents must be positive, got {shape:?}")));
        }
        if data.len() != numel(shape) {
            return Err(contract(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(())
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(vec![value], vec![1], false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        assert!(shape.iter().all(|&e| e > 0), "tensor extents must be positive");
        Self::build(vec![value; numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    /// Result of an operation. When no parent requires a gradient the
    /// backward closure and parent links are dropped.
    pub fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Self::build(data, shape, true, parents, Some(backward))
        } else {
            Self::build(data, shape, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
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

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Copy of the value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, Vec::new(), None)
    }

    /// Accumulated leaf gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn parents(&self) -> &[Tensor] {
        &self.0.parents
    }
}

/// Gradients of one backward pass, keyed by leaf identity.
#[derive(Debug, Default, Clone)]
pub struct GradientMap {
    grads: HashMap<u64, Vec<f64>>,
}

impl GradientMap {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|g| g.as_slice())
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate(slot: &mut Vec<f64>, g: &[f64]) {
    for (s, v) in slot.iter_mut().zip(g) {
        *s += v;
    }
}

/// Differentiates a single-element `root` with respect to every leaf that
/// requires a gradient.
pub fn backward(root: &Tensor) -> Result<GradientMap> {
    if root.numel() != 1 {
        return Err(contract(format!(
            "backward requires a scalar root, got shape {:?}",
            root.shape()
        )));
    }
    let mut out = GradientMap::default();
    if !root.requires_grad() {
        return Ok(out);
    }

    // Iterative post-order DFS over nodes that require gradients.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashMap<u64, ()> = HashMap::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if visited.insert(node.id(), ()).is_some() {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.parents() {
            if p.requires_grad() && !visited.contains_key(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }

    let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
    pending.insert(root.id(), vec![1.0]);
    for node in order.iter().rev() {
        let Some(g) = pending.remove(&node.id()) else {
            continue;
        };
        match &node.0.backward {
            None => {
                {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => accumulate(acc, &g),
                        None => *slot = Some(g.clone()),
                    }
                }
                out.grads.insert(node.id(), g);
            }
            Some(f) => {
                let parent_grads = f(&g, node.parents(), node.data());
                debug_assert_eq!(parent_grads.len(), node.parents().len());
                for (p, pg) in node.parents().iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.id()) {
                        Some(acc) => accumulate(acc, &pg),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}
