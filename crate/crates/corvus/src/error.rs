//! Error taxonomy shared across the workbench.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorvusError {
    /// Caller violated an operation precondition (bad shape, id out of range,
    /// empty window, degenerate fractions, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A numeric computation left the finite domain or a factorization failed.
    #[error("numeric error at layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    /// An objective or probe was composed in a way the engine cannot
    /// differentiate or evaluate.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Probe fitting could not proceed (degenerate targets, tainted records).
    #[error("training error: {0}")]
    Training(String),

    /// Dataset generation failed a construction invariant.
    #[error("generation error: {0}")]
    Generation(String),

    /// A persisted artifact could not be parsed.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorvusError>;

impl CorvusError {
    pub fn input(msg: impl Into<String>) -> Self {
        CorvusError::Input(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CorvusError::Contract(msg.into())
    }

    pub fn training(msg: impl Into<String>) -> Self {
        CorvusError::Training(msg.into())
    }

    pub fn generation(msg: impl Into<String>) -> Self {
        CorvusError::Generation(msg.into())
    }
}
