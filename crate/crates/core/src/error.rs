use thiserror::Error;

/// Error type shared by all core modules.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument fell outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two vectors or batches that must agree in size did not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration was rejected before any work started.
    #[error("invalid config: {0}")]
    Config(String),

    /// Reverse-time integration produced a non-finite state.
    #[error("integration failed at step {step} (t = {t}): non-finite state")]
    NonFiniteState { step: usize, t: f64 },

    /// Checkpoint file could not be read, parsed, or validated.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
