use thiserror::Error;

/// Crate-wide error type. Variants map to the failure classes of the
/// pipeline stages: parsing and validation of on-disk data, arity and shape
/// mismatches, remote transport and protocol faults, filter-schedule misuse,
/// and numerical failures during training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("arity mismatch: {0}")]
    Arity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training error at step {step}: {message}")]
    Training { step: u64, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wrap an error with the name of the pipeline stage it occurred in.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
