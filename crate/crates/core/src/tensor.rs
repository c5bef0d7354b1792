//! Dense f64 tensors with an attached gradient slot.
//!
//! Everything real-valued in the model (hidden states, queries, attention
//! weights, gate parameters) lives in a [`Tensor`]. Shapes are row-major;
//! scalars are represented as shape `[1]`.

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use rand::Rng;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the shape.
    DataLength { shape: Vec<usize>, got: usize },
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operation that requires at least one element got none.
    EmptyInput { op: &'static str },
    /// Backward was asked to differentiate a non-scalar value.
    NotScalar { shape: Vec<usize> },
    /// The loss tensor was not produced by this tape.
    NotInGraph,
    /// A numeric-domain precondition failed (NaN or infinite input).
    NonFinite { op: &'static str },
    /// Uniform init called with an empty interval.
    InvalidRange { low: f64, high: f64 },
    /// Dropout probability outside `[0, 1)`.
    InvalidProbability { p: f64 },
    /// An index argument exceeds the tensor extent.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    /// A token list does not form a valid vocabulary (reserved entries
    /// missing or duplicates present).
    InvalidVocab,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { shape, got } => {
                write!(f, "data length {got} does not match shape {shape:?}")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::EmptyInput { op } => write!(f, "{op}: empty input"),
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::NotInGraph => write!(f, "loss tensor was not produced by this tape"),
            TensorError::NonFinite { op } => write!(f, "{op}: input contains NaN or infinity"),
            TensorError::InvalidRange { low, high } => {
                write!(f, "uniform init requires low < high, got [{low}, {high}]")
            }
            TensorError::InvalidProbability { p } => {
                write!(f, "dropout probability must lie in [0, 1), got {p}")
            }
            TensorError::IndexOutOfRange { op, index, len } => {
                write!(f, "{op}: index {index} out of range for length {len}")
            }
            TensorError::InvalidVocab => {
                write!(f, "token list is not a valid vocabulary")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense numeric array with shape and an optional same-shape gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::DataLength {
                shape,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient slot, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Shared handle to a tensor; the unit the tape records operations over.
///
/// Clones are cheap and alias the same storage. Parameters keep their handle
/// across training steps so gradients written by the backward pass land in
/// the live parameter tensor.
#[derive(Clone)]
pub struct Var(Rc<RefCell<Tensor>>);

impl Var {
    pub fn new(t: Tensor) -> Self {
        Var(Rc::new(RefCell::new(t)))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Var::new(Tensor::zeros(shape))
    }

    pub fn scalar(value: f64) -> Self {
        Var::new(Tensor::scalar(value))
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Ok(Var::new(Tensor::new(shape, data)?))
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor> {
        self.0.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.borrow().is_empty()
    }

    /// Copies the values out; fine for tests and exports, not for hot loops.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data().to_vec()
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad().map(|g| g.to_vec())
    }

    pub fn item(&self) -> f64 {
        let t = self.0.borrow();
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    pub fn set_data(&self, data: &[f64]) {
        let mut t = self.0.borrow_mut();
        assert_eq!(t.len(), data.len(), "set_data length mismatch");
        t.data_mut().copy_from_slice(data);
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().zero_grad();
    }

    /// Identity of the underlying storage, used by the tape to intern vars.
    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// True when both handles alias the same storage.
    pub fn same_storage(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.0.borrow();
        write!(f, "Var(shape={:?})", t.shape())
    }
}

/// Fresh tensor with i.i.d. uniform entries in `[low, high)`.
pub fn init_uniform(
    shape: &[usize],
    low: f64,
    high: f64,
    rng: &mut impl Rng,
) -> Result<Tensor, TensorError> {
    if low >= high {
        return Err(TensorError::InvalidRange { low, high });
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(low..high)).collect();
    Tensor::new(shape.to_vec(), data)
}
