use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid architecture, schedule or experiment description.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed data handed to an operation (bad labels, shapes, selectors).
    #[error("input error: {0}")]
    Input(String),

    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Binary dataset file is malformed.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    /// Training diverged or produced a non-finite update.
    #[error("training error in layer {layer}: {msg}")]
    Training { layer: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
