//! Minimal reverse-mode autodiff over dense row-major matrices.
//!
//! Ops are recorded on a linear [`Tape`]; [`Tape::backward`] replays the record
//! in reverse. Every op used by the models in this crate lives here and is
//! covered by a finite-difference [`gradcheck`].

mod gemm;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub mod layers;

pub use gradcheck::{gradcheck, gradcheck_params, gradcheck_with, rel_err, GradcheckConfig, GradcheckReport};
pub use optim::{AdamW, CosineSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{softmax_in_place, AttnOpts, CustomVjp, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range 0..{bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, NnError>;
