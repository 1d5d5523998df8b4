//! Dense tensor core with reverse-mode automatic differentiation.
//!
//! Tensors are immutable value-like handles (`Arc` inside). Every op builds a
//! node in a dynamic DAG; [`backward`] walks the DAG in reverse topological
//! order and returns a [`Gradients`] map keyed by tensor id. Leaves created
//! with `requires_grad = true` receive gradients; everything reachable only
//! through non-differentiable leaves is pruned from the walk.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type GradFn = Box<dyn Fn(&[f64], &mut Gradients) + Send + Sync>;

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) grad_fn: Option<GradFn>,
    pub(crate) op: &'static str,
}

/// Immutable handle to a node in the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Arc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("op", &self.inner.op)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn assert_finite(op: &'static str, data: &[f64]) {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            panic!("numeric failure in op `{op}`: non-finite value {v} at index {i}");
        }
    }
}

impl Tensor {
    fn new_node(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        grad_fn: Option<GradFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        assert_finite(op, &data);
        Tensor {
            inner: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                parents,
                grad_fn,
                op,
            }),
        }
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        grad_fn: impl Fn(&[f64], &mut Gradients) + Send + Sync + 'static,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        let grad_fn: Option<GradFn> = if requires_grad {
            Some(Box::new(grad_fn))
        } else {
            None
        };
        Tensor::new_node(op, shape, data, requires_grad, parents, grad_fn)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor::new_node("leaf", shape.to_vec(), data, false, vec![], None)
    }

    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        let t = Tensor::from_vec(shape, data);
        t.requires_grad()
    }

    /// Returns a copy of this tensor marked as a differentiable leaf.
    pub fn requires_grad(&self) -> Tensor {
        Tensor::new_node(
            "leaf",
            self.inner.shape.clone(),
            self.inner.data.clone(),
            true,
            vec![],
            None,
        )
    }

    /// Detaches from the graph: same values, no history, no gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::new_node(
            "leaf",
            self.inner.shape.clone(),
            self.inner.data.clone(),
            false,
            vec![],
            None,
        )
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![1.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_vec(&[n, n], data)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn is_differentiable(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.len(),
            1,
            "item() requires a single-element tensor, shape is {:?}",
            self.shape()
        );
        self.inner.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape().len(), 2, "rows() requires a 2-D tensor");
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape().len(), 2, "cols() requires a 2-D tensor");
        self.shape()[1]
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and data.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Gradient map produced by [`backward`], keyed by tensor id.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub(crate) fn accumulate(&mut self, t: &Tensor, contribution: &[f64]) {
        if !t.inner.requires_grad {
            return;
        }
        let slot = self
            .map
            .entry(t.inner.id)
            .or_insert_with(|| vec![0.0; t.len()]);
        debug_assert_eq!(slot.len(), contribution.len());
        for (g, c) in slot.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.inner.id).map(|v| v.as_slice())
    }

    /// Gradient of a leaf; zeros if the leaf was unreachable from the loss.
    pub fn grad_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.map
            .get(&t.inner.id)
            .cloned()
            .unwrap_or_else(|| vec![0.0; t.len()])
    }

    /// Global L2 norm over the gradients of the given tensors.
    pub fn global_norm(&self, params: &[&Tensor]) -> f64 {
        let mut sq = 0.0;
        for p in params {
            if let Some(g) = self.map.get(&p.inner.id) {
                for v in g {
                    sq += v * v;
                }
            }
        }
        sq.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Adds another gradient map into this one (fixed, caller-defined order).
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.map {
            let slot = self.map.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
}

/// Reverse-mode sweep from a scalar loss. Returns `∂loss/∂leaf` for every
/// differentiable leaf reachable from `loss`.
///
/// Panics if `loss` is not a scalar.
pub fn backward(loss: &Tensor) -> Gradients {
    assert_eq!(
        loss.len(),
        1,
        "backward requires a scalar loss, shape is {:?}",
        loss.shape()
    );
    let mut grads = Gradients::default();
    if !loss.inner.requires_grad {
        return grads;
    }
    grads.map.insert(loss.inner.id, vec![1.0]);

    // Iterative post-order DFS over differentiable ancestors.
    let order = topo_order(loss);
    for t in order.iter().rev() {
        if let Some(grad_fn) = &t.inner.grad_fn {
            let g = match grads.map.get(&t.inner.id) {
                Some(g) => g.clone(),
                None => continue, // fan-in never reached by the loss
            };
            grad_fn(&g, &mut grads);
        }
    }
    grads
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashMap<u64, ()> = HashMap::new();
    // (tensor, next child index) stack
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.inner.id, ());
    while let Some((t, child)) = stack.pop() {
        let parents = &t.inner.parents;
        if child < parents.len() {
            stack.push((t.clone(), child + 1));
            let p = &parents[child];
            if p.inner.requires_grad && !visited.contains_key(&p.inner.id) {
                visited.insert(p.inner.id, ());
                stack.push((p.clone(), 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}
