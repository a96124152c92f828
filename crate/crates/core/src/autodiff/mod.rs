//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Leaves
//! created with [`Tape::param`] are tracked; [`Tape::constant`] leaves are
//! not. [`Tape::backward`] replays the tape in reverse and returns the
//! gradient of a scalar loss with respect to every tracked leaf.
//!
//! There is no broadcasting: binary operations require identical shapes, and
//! the few per-channel operations (`add_bias`, `scale_channels`) are explicit.
//! Image tensors are laid out NHWC, so the channel axis is always the last
//! (fastest-varying) one.

mod check;
mod kernels;
mod ops;

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};

pub use check::{
    compare_gradients, finite_difference_grad, grad_check, grad_check_many,
    grad_check_many_sampled, GradReport, DEFAULT_FD_STEP, GRAD_CHECK_TOL,
};
pub use ops::{concat_channels, Padding, ResampleTaps};

use ops::Op;

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation, replayed in reverse by [`Tape::backward`].
///
/// A tape is single-threaded; independent tapes may live on separate threads.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// A tracked leaf: gradients are reported for it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An untracked leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an operation result. Backward bookkeeping is dropped when no
    /// parent is tracked.
    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Constant };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape.clone()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        self.consumed.set(true);

        let mut buf = ops::GradBuf::new(&nodes);
        buf.seed(loss.id);
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for id in (0..=loss.id).rev() {
            let Some(g) = buf.take(id) else { continue };
            let node = &nodes[id];
            match node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    });
                }
                _ => ops::backward_node(&node.op, &node.value, &g, &nodes, &mut buf),
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && leaves[id].is_none() {
                leaves[id] = Some(Tensor::zeros(&node.value.shape));
            }
        }
        for g in leaves.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape.clone())
    }

    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Untracked copy of this value.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}

/// Result of [`Tape::backward`]: one gradient per tracked leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a tracked leaf; `None` for untracked or interior vars.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_validation() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap().len(), 4);
        assert!(Tensor::ones(&[2, 3]).reshape(&[5]).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_slice(&[1.0, -2.0, 3.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_l2_norm() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_slice(&[3.0, 4.0]));
        let loss = x.l2_norm().unwrap();
        assert_eq!(loss.item(), 5.0);
        let g = tape.backward(loss).unwrap();
        let d = g.wrt(x);
        assert!((d.data()[0] - 0.6).abs() < 1e-15 && (d.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_slice(&[1.0, 2.0]));
        let y = tape.param(Tensor::from_slice(&[0.5]));
        let loss = y.mul(y).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(y).data(), &[1.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_slice(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let c = tape.constant(Tensor::from_slice(&[1.0, 2.0]));
        let detached = c.sum().unwrap();
        assert!(matches!(tape.backward(detached), Err(Error::Detached)));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_slice(&[2.0]));
        let y = x.mul(x).unwrap();
        let loss = y.add(x).unwrap().add(y).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        // d/dx (2x^2 + x) = 4x + 1
        assert_eq!(g.wrt(x).data(), &[9.0]);
    }
}
