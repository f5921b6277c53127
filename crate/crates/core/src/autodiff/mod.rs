//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive as it executes. Trainable state lives
//! in a [`ParamStore`]; a parameter enters a computation through
//! [`Tape::param`], and [`Tape::backward`] writes `d loss / d param` into the
//! store's gradient accumulators. The tape is rebuilt for every forward pass.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, Coordinate, GradCheckConfig, GradCheckReport};
pub use ops::{Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use tape::{Coeff, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{0}: empty input list")]
    EmptyInput(&'static str),
    #[error("{0}: inputs and coefficients differ in length")]
    CoeffCount(&'static str),
    #[error("coefficient index {index} out of range for tensor of {len} elements")]
    CoeffIndex { index: usize, len: usize },
    #[error("data length {got} does not match shape (expected {expected})")]
    DataLength { expected: usize, got: usize },
    #[error("batch norm in train mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels for a batch of {rows}")]
    BatchSizeMismatch { rows: usize, labels: usize },
    #[error("label smoothing {0} outside [0, 1)")]
    InvalidSmoothing(f64),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("invalid step {0}")]
    InvalidStep(f64),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// What a parameter is for. Optimizers treat edge weights differently from
/// everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    NodeWeight,
    EdgeWeight,
    Head,
    Classifier,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, value: Tensor<T>, role: Role) -> ParamId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter { value, grad, role });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { value: p.value.cast(), grad: p.grad.cast(), role: p.role })
                .collect(),
        }
    }
}
