use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree along a named axis.
    #[error("dimension mismatch in {op}: axis `{axis}` expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error in {path}: {msg} (byte offset {offset})")]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        lr: f64,
        loss: f64,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from invalid user input rather than numerics or IO.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Usage(_) | Error::Dimension { .. })
    }
}

/// Failures while decoding a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {found:?}, expected \"GEKT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid config echo: {0}")]
    ConfigEcho(String),
    #[error("tensor `{name}` is not part of the model")]
    UnknownTensor { name: String },
    #[error("tensor `{name}` missing from checkpoint")]
    MissingTensor { name: String },
    #[error("tensor `{name}` has shape {got:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: [usize; 4],
        got: [usize; 4],
    },
    #[error("malformed field: {0}")]
    Malformed(String),
}
