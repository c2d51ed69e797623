use alloc::string::String;

use crate::synth::{PairId, Split};

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the normalization threshold")]
    DegenerateVector { norm: f64 },
    #[error("anchor-alignment direction has norm {norm:e}; sample carries no direction")]
    DegenerateDirection { norm: f64 },
    #[error("shape mismatch in {op}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { op: &'static str, expected: (usize, usize), found: (usize, usize) },
    #[error("non-finite gradient at tape node {node}")]
    NonFiniteGradient { node: usize },
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("every sample in the batch was skipped by the orthogonal-subspace term")]
    AllSamplesDegenerate,
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("pair {pair:?} may not be served from split {split:?}")]
    ForbiddenPair { pair: PairId, split: Split },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("input is empty")]
    EmptyInput,
    #[error("expected {expected} class prototypes, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// True for failures caused by non-finite arithmetic (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } | Error::AllSamplesDegenerate)
    }
}
