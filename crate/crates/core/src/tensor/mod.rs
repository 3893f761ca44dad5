//! Minimal deterministic tensor library with reverse-mode differentiation.
//!
//! Tensors are immutable row-major buffers. Every op that consumes a tensor
//! with `requires_grad` records a backward closure; [`Tensor::backward`] walks
//! the recorded graph in reverse topological order. Leaves keep their
//! accumulated gradient in a slot readable through [`Tensor::grad`].

mod conv;
mod flops;
mod norm;
mod ops;
mod resample;
mod scalar;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv2d_counted, conv_output_dim};
pub use flops::{FlopCounter, FlopEntry};
pub use norm::{batch_norm2d, BatchMoments, BN_EPS, BN_MOMENTUM};
pub use resample::{
    bicubic_sample, bilinear_resize, cubic_weight, depth_to_space, pad_replicate, space_to_depth,
    CATMULL_ROM_A,
};
pub use scalar::{gemm, Float};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Float> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Float> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    retain_grad: AtomicBool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Rank-n array of `T` with an optional gradient slot.
///
/// Cloning is cheap (reference counted); the data never changes after
/// construction.
pub struct Tensor<T: Float = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.inner.node.as_ref().map(|n| n.op).unwrap_or("leaf");
        write!(
            f,
            "Tensor(shape={:?}, op={}, requires_grad={})",
            self.inner.shape, op, self.inner.requires_grad
        )
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn ensure_finite<T: Float>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Float> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                retain_grad: AtomicBool::new(false),
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Leaf tensor without gradient tracking.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor; with `requires_grad` its gradient is populated by
    /// [`Tensor::backward`].
    pub fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        ensure_finite("from_vec", &data)?;
        Ok(Self::build(shape.to_vec(), data, requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Result of an op. Fails on non-finite output. The backward closure is
    /// dropped when no parent tracks gradients.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        ensure_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward,
        });
        Ok(Self::build(shape, data, requires_grad, node))
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn dims(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::shape("item", format!("expected 1 element, shape {:?}", self.shape())));
        }
        Ok(self.inner.data[0])
    }

    /// Accumulated gradient, if any has been computed.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Keep the gradient of this (non-leaf) tensor after backward.
    pub fn retain_grad(&self) {
        self.inner.retain_grad.store(true, Ordering::Relaxed);
    }

    /// Same values, cut from the graph: no gradient flows through the result.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// Element type conversion. The result is a leaf.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self.inner.data.iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::build(self.inner.shape.clone(), data, false, None)
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode accumulation from a scalar.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Post-order DFS over the differentiable part of the graph.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    if t.inner.retain_grad.load(Ordering::Relaxed) {
                        t.accumulate_grad(&g);
                    }
                    let parent_grads = (node.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.len(), "op {}", node.op);
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(vec![1.0; 5], &[2, 3]).is_err());
    }

    #[test]
    fn rejects_non_finite_input() {
        assert!(matches!(
            Tensor::<f32>::from_vec(vec![f32::NAN], &[1]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn backward_of_linear_sum_is_constant() {
        let x = Tensor::<f64>::leaf(vec![1.0, -2.0, 3.5], &[3], true).unwrap();
        let loss = x.scale(2.0).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let y = Tensor::<f64>::leaf(vec![3.0, 4.0], &[2], true).unwrap();
        let loss = x.mul(&y.detach()).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
        assert!(y.grad().is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(x.relu().unwrap().backward().is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::<f64>::leaf(vec![3.0], &[1], true).unwrap();
        // x*x + x  -> d/dx = 2x + 1 = 7
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }
}
