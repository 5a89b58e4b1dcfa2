use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline stages can surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("{0} is not an RGB image (enable gray replication to accept it)")]
    NonRgb(PathBuf),

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("metric depth {value} m exceeds the 16-bit millimeter range (max 65.535 m)")]
    RangeOverflow { value: f64 },

    #[error("missing depth sidecar {0}")]
    MissingSidecar(PathBuf),

    #[error("corrupt sidecar {path}: {reason}")]
    CorruptSidecar { path: PathBuf, reason: String },

    #[error("record id {0} already present in manifest")]
    DuplicateId(String),

    #[error("manifest {path} line {line}: {reason}")]
    ParseFailure {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("backend {backend_id} failed{}: {reason}", item.as_ref().map(|i| format!(" on {i}")).unwrap_or_default())]
    BackendFailure {
        backend_id: String,
        item: Option<String>,
        reason: String,
    },

    #[error("caption backend {0} returned an empty caption")]
    EmptyCaption(String),

    #[error("no readable images in {0}")]
    EmptyInputDir(PathBuf),

    #[error("triplet manifest {0} contains no triplets")]
    EmptyTriplets(PathBuf),

    #[error("checkpoint belongs to backend {checkpoint_backend}, not {backend}")]
    CheckpointMismatch {
        backend: String,
        checkpoint_backend: String,
    },

    #[error("threshold must be positive, got {0}")]
    NonPositiveThreshold(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("generated record {0} has no conditioning depth")]
    MissingConditioningDepth(String),

    #[error("manifest {path} is invalid: {reason}")]
    ManifestInvalid { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no valid pixels to evaluate")]
    EmptyValidSet,

    #[error("prediction must be positive on valid pixels (found {0})")]
    NonPositivePrediction(f64),

    #[error("no results to report")]
    EmptyResults,

    #[error("depth range is degenerate: {0}")]
    DegenerateDepth(String),

    #[error("backscatter fit failed: {0}")]
    FitFailure(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::IoFailure { path, source }
        }
    }

    pub(crate) fn backend(id: &str, item: Option<&str>, reason: impl Into<String>) -> Self {
        Error::BackendFailure {
            backend_id: id.to_string(),
            item: item.map(str::to_string),
            reason: reason.into(),
        }
    }
}
