//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable N-dimensional buffer plus an optional record
//! of the operation that produced it. Calling [`Tensor::backward`] on a scalar
//! walks the recorded graph in reverse topological order and accumulates
//! gradients into every reachable tensor that requires them.

mod conv;
mod gradcheck;
mod linalg;
mod norm;
mod ops;
mod resize;
mod scalar;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{ensure, Result};

pub use conv::{conv2d, conv2d_with, conv_out_extent, ConvAlgo, ConvOptions};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use norm::{batch_norm, layer_norm, BnStats, BN_EPSILON, BN_MOMENTUM};
pub use resize::{bilinear_resize, upsample2};
pub use scalar::{DType, Scalar};
pub(crate) use scalar::{gemm, MatView};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Gradient contributions for each input of an op, `None` where the input
/// does not need one.
pub type InputGrads<T> = Vec<Option<Vec<T>>>;

/// Arguments handed to a backward rule.
pub struct BackwardArgs<'a, T: Scalar> {
    pub grad_output: &'a [T],
    pub output: &'a [T],
    pub inputs: &'a [Tensor<T>],
}

type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> InputGrads<T> + Send + Sync>;

struct OpRecord<T: Scalar> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    op: Option<OpRecord<T>>,
}

/// Reference-counted handle to an immutable tensor node. Cloning is cheap.
pub struct Tensor<T: Scalar> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad);
        if let Some(op) = &self.node.op {
            s.field("op", &op.name);
        }
        if self.numel() <= 16 {
            s.field("data", &self.node.data);
        }
        s.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn make(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Option<OpRecord<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        ensure!(
            numel_of(shape) == data.len(),
            "shape {:?} holds {} elements but data has {}",
            shape,
            numel_of(shape),
            data.len()
        );
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        ensure!(
            numel_of(shape) == data.len(),
            "shape {:?} holds {} elements but data has {}",
            shape,
            numel_of(shape),
            data.len()
        );
        Ok(Self::make(data, shape.to_vec(), true, None))
    }

    pub fn from_f64(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(values.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::make(vec![value; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::make(vec![value], Vec::new(), false, None)
    }

    /// New leaf sharing this tensor's values, with gradient tracking toggled.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::make(self.node.data.clone(), self.node.shape.clone(), requires_grad, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    /// Builds the result of a custom operation. When no input requires a
    /// gradient the record is dropped and the result is a constant.
    pub fn from_op<F>(
        name: &'static str,
        data: Vec<T>,
        shape: &[usize],
        inputs: Vec<Tensor<T>>,
        backward: F,
    ) -> Result<Self>
    where
        F: Fn(&BackwardArgs<'_, T>) -> InputGrads<T> + Send + Sync + 'static,
    {
        ensure!(
            numel_of(shape) == data.len(),
            "{name}: shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Ok(Self::op_result(name, data, shape.to_vec(), inputs, backward))
    }

    pub(crate) fn op_result<F>(
        name: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&BackwardArgs<'_, T>) -> InputGrads<T> + Send + Sync + 'static,
    {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let op = requires_grad.then(|| OpRecord {
            name,
            inputs,
            backward: Box::new(backward),
        });
        Self::make(data, shape, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn dims(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.node.op.as_ref().map(|op| op.name)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        ensure!(self.numel() == 1, "item() on tensor of shape {:?}", self.shape());
        Ok(self.node.data[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad().unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Identity of the underlying node.
    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .node
            .data
            .iter()
            .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
            .collect();
        Tensor::make(data, self.node.shape.clone(), false, None)
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate across calls
    /// until [`zero_grad`](Self::zero_grad) resets them.
    pub fn backward(&self) -> Result<()> {
        ensure!(
            self.numel() == 1,
            "backward() needs a scalar root, got shape {:?}",
            self.shape()
        );
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for tensor in order.iter().rev() {
            let Some(grad) = pending.remove(&tensor.id()) else {
                continue;
            };
            if let Some(op) = &tensor.node.op {
                let args = BackwardArgs {
                    grad_output: &grad,
                    output: &tensor.node.data,
                    inputs: &op.inputs,
                };
                let input_grads = (op.backward)(&args);
                debug_assert_eq!(input_grads.len(), op.inputs.len(), "{}", op.name);
                for (input, g) in op.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(g.len(), input.numel(), "{} grad length", op.name);
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => {
                            pending.insert(input.id(), g);
                        }
                    }
                }
            }
            let mut slot = tensor.node.grad.lock().expect("grad lock");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
                None => *slot = Some(grad),
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that require gradients.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
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
            if let Some(op) = &t.node.op {
                for input in &op.inputs {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Image-tensor extents, checking for rank 4.
pub(crate) fn nchw<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    ensure!(t.dims() == 4, "{what}: expected NCHW tensor, got shape {:?}", t.shape());
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let x = Tensor::<f64>::parameter(vec![3.0], &[]).unwrap();
        let y = Tensor::<f64>::parameter(vec![4.0], &[]).unwrap();
        let z = x.mul(&y).unwrap();
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        assert_eq!(y.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn constant_root_gives_zero_grad() {
        let x = Tensor::<f64>::parameter(vec![1.0, -2.0, 5.0], &[3]).unwrap();
        let root = x.mul_scalar(0.0).sum().add_scalar(7.0);
        root.backward().unwrap();
        assert_eq!(x.grad_or_zeros(), vec![0.0; 3]);

        let y = Tensor::<f64>::parameter(vec![1.0], &[1]).unwrap();
        let unrelated = Tensor::<f64>::scalar(2.0);
        unrelated.backward().unwrap();
        assert_eq!(y.grad_or_zeros(), vec![0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.relu().backward().is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::parameter(vec![2.0], &[1]).unwrap();
        let root = x.mul(&x).unwrap().sum();
        root.backward().unwrap();
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn shared_subexpression_sums_paths() {
        let x = Tensor::<f64>::parameter(vec![1.5], &[1]).unwrap();
        let y = x.mul_scalar(2.0);
        let root = y.add(&y).unwrap().add(&x).unwrap().sum();
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
        // intermediate tensors keep their gradient too
        assert_eq!(y.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::<f32>::from_vec(vec![1.0; 5], &[2, 3]).is_err());
    }

    #[test]
    fn tensors_cross_threads() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let handle = {
            let x = x.clone();
            std::thread::spawn(move || x.mul_scalar(3.0).sum().backward().unwrap())
        };
        handle.join().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }
}
