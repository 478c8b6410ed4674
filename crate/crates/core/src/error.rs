use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. Each variant maps onto one of the CLI's
/// exit-code classes (see [`MivcError::is_usage`]).
#[derive(Debug, Error)]
pub enum MivcError {
    #[error("shape mismatch: {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MivcError {
    pub(crate) fn shape(
        op: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        MivcError::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MivcError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by how the library was called rather than by
    /// the data it was handed.
    pub fn is_usage(&self) -> bool {
        matches!(self, MivcError::Usage(_) | MivcError::Precondition(_))
    }
}

/// Failures while reading embedding files, manifests, CSV and checkpoints.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported version {version}")]
    BadVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated or malformed payload: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("{path}: record declares {expected} instances, file holds {found}")]
    CountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: non-finite value at flat index {index}")]
    NonFinite { path: PathBuf, index: usize },

    #[error("{path}: line {line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("duplicate bag_id {0:?} in manifest")]
    DuplicateBagId(String),

    #[error("bag {bag_id:?}: label {label} outside [0, {classes})")]
    LabelOutOfRange {
        bag_id: String,
        label: usize,
        classes: usize,
    },
}

pub type Result<T, E = MivcError> = std::result::Result<T, E>;
