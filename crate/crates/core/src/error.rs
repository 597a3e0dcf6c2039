use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is singular (pivot magnitude {pivot:.3e} below threshold)")]
    SingularMatrix { pivot: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("unsupported modulation scheme `{0}`")]
    UnsupportedScheme(String),

    #[error("ML search space of {candidates} candidates exceeds the 2^24 limit")]
    SearchSpaceTooLarge { candidates: f64 },

    #[error("invalid power or variance: {0}")]
    InvalidPower(String),

    #[error("invalid reverse step: dt={dt} must satisfy 0 < dt <= t={t}")]
    InvalidStep { t: f64, dt: f64 },

    #[error("invalid model or training configuration: {0}")]
    InvalidConfig(String),

    #[error("tensor shape mismatch for `{name}`")]
    ShapeMismatch { name: String },

    #[error("training diverged at step {step} (loss {loss})")]
    DivergedTraining { step: usize, loss: f64 },

    #[error("gradient check needs at least one probed parameter")]
    InvalidProbe,

    #[error("checkpoint not found: {0}")]
    CheckpointMissing(PathBuf),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the user's input files or flags rather than
    /// by the computation itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::UnsupportedScheme(_)
                | Error::InvalidConfig(_)
                | Error::ConfigInvalid(_)
                | Error::CheckpointMissing(_)
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}
