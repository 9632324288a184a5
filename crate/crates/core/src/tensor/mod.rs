//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional graph node. Operations
//! whose inputs track gradients record a node holding their inputs and a
//! backward closure; [`Tensor::backward`] walks that graph in reverse
//! topological order and deposits gradients on the leaves.
//!
//! Graph recording is controlled per thread with [`no_grad`]. Tensors created
//! inside a `no_grad` scope never allocate a node.

mod autograd;
mod element;
mod norm;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

pub use element::{DType, Element};
pub use norm::{batch_norm, BatchNormStats, BN_EPSILON, BN_MOMENTUM};
pub use ops::{
    add, concat, dropout, leaky_relu, matmul_batched, mul, permute, pointwise_linear, reduce,
    reduce_max_with_indices, reshape, scale, softmax_cross_entropy, softmax_rows, sum_all,
    ReduceKind,
};

pub(crate) use autograd::Node;

use crate::error::{Error, Result};

/// Forward-pass behaviour of layers with train/eval asymmetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording disabled on this thread.
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

#[derive(Clone)]
pub struct Tensor<T: Element> {
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
    node: Option<Arc<Node<T>>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.requires_grad());
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Self::raw(data, shape.to_vec()))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::from_f64_lossy(v)).collect(), shape)
    }

    pub(crate) fn raw(data: Vec<T>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            data: Arc::new(data),
            shape,
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::raw(vec![value; shape.iter().product()], shape.to_vec())
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![value], vec![])
    }

    /// A gradient-tracking leaf. Leaves are created regardless of [`no_grad`].
    pub fn variable(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let mut t = Self::from_vec(data, shape)?;
        t.node = Some(Arc::new(Node::leaf()));
        Ok(t)
    }

    /// Builds the result of an operation, recording a graph node when any
    /// input tracks gradients and recording is enabled.
    pub(crate) fn from_op<F>(
        data: Vec<T>,
        shape: Vec<usize>,
        name: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let mut out = Self::raw(data, shape);
        if grad_enabled() && inputs.iter().any(Tensor::requires_grad) {
            out.node = Some(Arc::new(Node::op(name, inputs, Box::new(backward))));
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.node.as_ref().is_some_and(|n| n.is_leaf())
    }

    /// Same values, no graph history.
    pub fn detach(&self) -> Self {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
            node: None,
        }
    }

    /// Accumulated gradient of a leaf, if any has been deposited.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let node = self.node.as_ref()?;
        node.leaf_grad()
            .map(|g| Tensor::raw(g, self.shape.clone()))
    }

    pub fn zero_grad(&self) {
        if let Some(node) = &self.node {
            node.clear_grad();
        }
    }

    /// Mutable access to the values. Copies on write when the buffer is still
    /// shared with a live graph.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Reverse-mode accumulation from this scalar into every reachable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape
            )));
        }
        let Some(root) = &self.node else {
            return Err(Error::Usage(
                "backward called on a tensor that does not track gradients".into(),
            ));
        };
        autograd::run_backward(root, vec![T::one()]);
        Ok(())
    }

    pub(crate) fn node(&self) -> Option<&Arc<Node<T>>> {
        self.node.as_ref()
    }
}

/// A named trainable tensor.
#[derive(Debug)]
pub struct Parameter<T: Element> {
    name: String,
    value: Tensor<T>,
    /// SGD momentum buffer, allocated on first use.
    pub momentum: Option<Vec<T>>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Parameter {
            name: name.into(),
            value: Tensor::variable(data, shape)?,
            momentum: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    /// Gradient buffer; zeros when nothing reached this parameter.
    pub fn grad(&self) -> Vec<T> {
        self.value
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(vec![1.0; 5], &[2, 3]).is_err());
        let t = Tensor::<f32>::from_vec(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    fn no_grad_never_records() {
        let w = Tensor::<f64>::variable(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| mul(&w, &w).unwrap());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
        let z = mul(&w, &w).unwrap();
        assert!(z.requires_grad());
    }

    #[test]
    fn backward_rejects_untracked_and_non_scalar() {
        let x = Tensor::<f64>::ones(&[1]);
        assert!(matches!(x.backward(), Err(Error::Usage(_))));
        let w = Tensor::<f64>::variable(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(w.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn grad_of_linear_map_is_input() {
        let x = Tensor::<f64>::from_vec(vec![3.0, -1.0, 0.5], &[3]).unwrap();
        let w = Tensor::variable(vec![0.1, 0.2, 0.3], &[3]).unwrap();
        sum_all(&mul(&w, &x).unwrap()).backward().unwrap();
        assert_eq!(w.grad().unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn grad_of_square() {
        let w = Tensor::<f64>::variable(vec![1.0, 2.0], &[2]).unwrap();
        sum_all(&mul(&w, &w).unwrap()).backward().unwrap();
        assert_eq!(w.grad().unwrap().to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let w = Tensor::<f64>::variable(vec![1.0, 2.0], &[2]).unwrap();
        let loss = sum_all(&mul(&w, &w).unwrap());
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap().to_vec(), vec![4.0, 8.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn unreachable_parameter_keeps_zero_grad() {
        let a = Parameter::<f64>::new("a", vec![1.0, 2.0], &[2]).unwrap();
        let b = Parameter::<f64>::new("b", vec![5.0], &[1]).unwrap();
        sum_all(a.value()).backward().unwrap();
        assert_eq!(a.grad(), vec![1.0, 1.0]);
        assert_eq!(b.grad(), vec![0.0]);
    }

    #[test]
    fn data_mut_copies_when_shared() {
        let mut p = Parameter::<f32>::new("p", vec![1.0], &[1]).unwrap();
        let snapshot = p.value().clone();
        p.data_mut()[0] = 2.0;
        assert_eq!(snapshot.data()[0], 1.0);
        assert_eq!(p.data()[0], 2.0);
    }
}
