use thiserror::Error;

use crate::weights_io::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid permutation of length {0}")]
    InvalidPermutation(usize),
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("probe selection failed: {0}")]
    Probe(String),
    #[error("models are incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
