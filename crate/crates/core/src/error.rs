use std::path::PathBuf;

use pmp_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, PmpError>;

#[derive(Debug, Error)]
pub enum PmpError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("proposal mode needs targets")]
    MissingTarget,

    #[error("prior mode must not see targets")]
    TargetInPriorMode,

    #[error("trajectory step {step} has no proposal distribution")]
    MissingProposal { step: usize },

    #[error("mask selects no nodes")]
    EmptyMask,

    #[error("instance generation gave up after {attempts} attempts: {hint}")]
    GenerationBudget { attempts: usize, hint: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint config hash {found:016x} does not match run config {expected:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },

    #[error("loss became non-finite at epoch {epoch}; diagnostics in {dump}")]
    NonFiniteLoss { epoch: usize, dump: PathBuf },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PmpError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        PmpError::Io {
            context: context.into(),
            source,
        }
    }
}
