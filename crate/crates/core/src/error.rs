use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding or encoding a portable pixmap / float map.
#[derive(Debug, Error)]
pub enum PnmError {
    #[error("bad magic number {found:?}, expected {expected:?}")]
    BadMagic { found: String, expected: &'static str },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Failures while reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("magic mismatch: not a checkpoint file")]
    BadMagic,
    #[error("unknown checkpoint version {0}")]
    UnknownVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op} at element {index}: {detail}")]
    Domain { op: &'static str, index: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-scalar loss of shape {0:?} passed to backward")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: LossReport },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("{path}: {source}")]
    Pnm { path: PathBuf, source: PnmError },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by the numbers themselves rather than by
    /// inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Domain { .. } | Error::NonFiniteLoss { .. } | Error::NonScalarLoss(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Pnm { .. } | Error::Checkpoint(_))
    }
}
