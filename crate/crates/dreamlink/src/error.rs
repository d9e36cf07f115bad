use thiserror::Error;

/// Errors surfaced by the dreamlink library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or argument values (maps to CLI exit code 2).
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor/grid shape disagreement between operands.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Timestep outside the schedule range.
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    /// A component was used before its weights were trained or loaded.
    #[error("untrained component: {0}")]
    Untrained(String),

    /// Degenerate numeric input (zero variance, zero-norm direction, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Instruction text outside the closed vocabulary or grammar.
    #[error("unparseable instruction: {0}")]
    Unparseable(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),

    /// Malformed tensor container or checkpoint on disk.
    #[error("container error: {0}")]
    Container(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
