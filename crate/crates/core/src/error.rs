//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the compression engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/plan dimensions disagree with the layer spec.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A layer or network description violates its invariants.
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    /// An argument is outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A model/dataset/plan/trace file does not parse.
    #[error("malformed file: {0}")]
    Format(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Replay buffer holds fewer transitions than a batch needs.
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    InsufficientBuffer { have: usize, need: usize },

    /// Fixture training missed its accuracy target.
    #[error("fixture reached {achieved:.2}% top-1, target {target:.2}%")]
    FixtureAccuracy { achieved: f64, target: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
