use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("worker {worker} does not own pair index {index}")]
    Ownership { worker: usize, index: usize },

    #[error("pair index {index} was not updated in step {step}")]
    Staleness { index: usize, step: u64 },

    #[error("near-zero embedding (norm {norm:e}) for input row {row}")]
    NearZeroEmbedding { row: usize, norm: f64 },

    #[error("forward tape does not match parameters or inputs: {0}")]
    TapeMismatch(String),

    #[error("collective shape error: {0}")]
    CollectiveShape(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid configuration for `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
