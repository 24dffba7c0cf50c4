//! Dense tensors with reverse-mode gradient recording.
//!
//! A [`DiffTensor`] is an immutable, reference-counted block of row-major
//! values plus an optional link to a node on a [`Tape`]. Primitive operations
//! are methods on the tape: when the tape is active and at least one operand
//! is recorded, the operation appends a backward record; otherwise the result
//! is a plain constant. [`DiffTensor::detach`] drops the tape link, which
//! severs every gradient path through the returned tensor.
//!
//! ```
//! use rtmlab::tensor::{DiffTensor, Tape};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(&DiffTensor::scalar(3.0));
//! let y = tape.mul(&x, &x).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.wrt(&x).unwrap().item(), 6.0);
//! ```
//!
//! Values are stored in the scalar type `T` (usually `f32`); every reduction
//! (dot products, sums, means, normalisation statistics) accumulates in `f64`.

mod gradcheck;
mod kernels;
mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use gradcheck::{grad_check, CoordCheck, GradCheckConfig, GradCheckFailure, GradCheckReport, Probe};
pub use tape::{Gradients, Tape};

/// Floating-point element type of a tensor.
pub trait Real: num_traits::Float + Copy + Default + PartialOrd + fmt::Debug + fmt::Display + Send + Sync + 'static {
    /// Scalar type tag written to checkpoints and diagnostics.
    const NAME: &'static str;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Errors raised by tensor construction and primitive operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("shape {shape:?} holds {expected} values but {found} were given")]
    ValueCount { shape: Vec<usize>, expected: usize, found: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on a tensor that is not recorded on this tape")]
    NotRecorded,
    #[error("{op}: operand was recorded on a different tape")]
    ForeignTape { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// Dense row-major tensor, optionally linked to a tape node.
#[derive(Clone)]
pub struct DiffTensor<T: Real = f32> {
    shape: Vec<usize>,
    values: Arc<Vec<T>>,
    node: Option<NodeRef>,
}

impl<T: Real> DiffTensor<T> {
    /// Builds an unrecorded tensor. Every extent must be positive.
    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                reason: "extents must be positive".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::ValueCount {
                shape: shape.to_vec(),
                expected,
                found: values.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::default(); n]).expect("zeros: positive extents")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: positive extents")
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            values: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Arc<Vec<T>>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> &Arc<Vec<T>> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Whether this tensor participates in gradient recording.
    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Same values, no tape link. Gradients never flow through the result.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.values.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts the element type. The result is unrecorded.
    pub fn cast<U: Real>(&self) -> DiffTensor<U> {
        DiffTensor {
            shape: self.shape.clone(),
            values: Arc::new(self.values.iter().map(|v| U::from_f64(v.as_f64())).collect()),
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }
}

impl<T: Real> fmt::Debug for DiffTensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.values.iter().take(8).copied().collect();
        f.debug_struct("DiffTensor")
            .field("shape", &self.shape)
            .field("recorded", &self.is_recorded())
            .field("values", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_value_count() {
        let err = DiffTensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ValueCount { expected: 6, found: 5, .. }));
        assert!(DiffTensor::<f32>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn detach_is_idempotent() {
        let tape = Tape::<f64>::new();
        let t = tape.leaf(&DiffTensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let once = t.detach();
        let twice = once.detach();
        assert!(!once.is_recorded() && !twice.is_recorded());
        assert_eq!(once.values(), twice.values());
        assert_eq!(once.values(), t.values());
    }
}
