use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("vector is not unit length (norm {0})")]
    NotUnit(f64),
    #[error("specular point outside wall extent")]
    OutsideWall,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("expected {expected} actions, got {got}")]
    ActionShape { expected: usize, got: usize },
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("allocation changed off a macro-step boundary (t = {0})")]
    Phase(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("integer overflow computing {0}")]
    Overflow(String),
    #[error("checkpoint dimensions do not match config: {0}")]
    DimensionMismatch(String),
    #[error("worker for env {env_id} (seed {seed}) failed: {source}")]
    WorkerFailure {
        env_id: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by NaN/inf or exploding values during training.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) => true,
            Error::WorkerFailure { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    /// True for invalid or inconsistent user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_) | Error::DimensionMismatch(_) | Error::Overflow(_))
    }
}
