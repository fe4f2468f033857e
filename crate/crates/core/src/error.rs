use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UmtlError {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image smaller than one patch ({height}x{width} < {patch})")]
    ImageTooSmall {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("empty bag: {0}")]
    EmptyBag(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("missing label for slide {slide} instance {instance}")]
    MissingLabel { slide: String, instance: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("digest mismatch for {path}: expected {expected}, found {found}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

impl UmtlError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        UmtlError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UmtlError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code used by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            UmtlError::InvalidConfig { .. } => "E_CONFIG",
            UmtlError::Shape(_) => "E_SHAPE",
            UmtlError::ImageTooSmall { .. } => "E_IMAGE_SMALL",
            UmtlError::EmptyBag(_) => "E_EMPTY_BAG",
            UmtlError::DegenerateBatch(_) => "E_DEGENERATE_BATCH",
            UmtlError::DegenerateLabels(_) => "E_DEGENERATE_LABELS",
            UmtlError::MissingLabel { .. } => "E_MISSING_LABEL",
            UmtlError::Diverged(_) => "E_DIVERGED",
            UmtlError::MissingFile(_) => "E_MISSING_FILE",
            UmtlError::DigestMismatch { .. } => "E_DIGEST",
            UmtlError::Malformed { .. } => "E_MALFORMED",
            UmtlError::Io { .. } => "E_IO",
            UmtlError::Json(_) => "E_JSON",
            UmtlError::Other(_) => "E_OTHER",
        }
    }
}

pub type Result<T> = std::result::Result<T, UmtlError>;
