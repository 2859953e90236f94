use std::io;

use thiserror::Error;

/// Errors produced while building, training, or loading a classifier.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("line {line}: no label token")]
    NoLabel { line: usize },

    #[error("corpus contains no labeled lines")]
    EmptyCorpus,

    #[error("label id {label} out of range for {n_labels} labels")]
    InvalidLabel { label: usize, n_labels: usize },

    #[error("forward trace does not match current parameter shapes")]
    StaleTrace,

    #[error("non-finite gradient at example {example}")]
    NonFiniteGradient { example: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("not a model file (bad magic)")]
    BadMagic,

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
