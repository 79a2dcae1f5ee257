use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::model::HeadId;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("depth limit {depth} outside 1..={n_layers}")]
    DepthOutOfRange { depth: usize, n_layers: usize },

    #[error("head {0} missing from scores")]
    MissingHead(HeadId),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{source_name}:{line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (last finite total: {last_total:?})")]
    Diverged {
        step: usize,
        last_total: Option<f64>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
