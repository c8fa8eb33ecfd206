//! Small neural-network core: a fixed layer vocabulary with hand-derived
//! backward passes, plain SGD, a finite-difference checker and a binary
//! weight format. Not a general autodiff engine.

mod gradcheck;
pub mod io;
mod network;
mod params;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, half_squared_error, GradCheckReport, LossFn};
pub use network::{Layer, LayerSpec, Mode, Network, Tape};
pub use params::{sgd_step, Fnv64, Gradients, Param, ParameterSet};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at {layer}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("duplicate parameter {0}")]
    DuplicateParameter(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("tape does not belong to this network")]
    StaleTape,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("weight manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("corrupted weight file: {0}")]
    CorruptWeights(String),
    #[error(transparent)]
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
