use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("instance {instance} covers semantic labels {first} and {second}")]
    InconsistentInstance {
        instance: u32,
        first: u32,
        second: u32,
    },
    #[error("instance label {0} occupies no pixels")]
    EmptyInstanceLabel(u32),
    #[error("label {label} outside [1, {max}]")]
    LabelOutOfRange { label: u32, max: u32 },
    #[error("class {class} outside [1, {max}]")]
    ClassOutOfRange { class: u32, max: u32 },
    #[error("layer index {index} outside [1, {max}]")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("epoch {epoch} outside [1, {epochs}]")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("no instances to evaluate")]
    NoInstances,
    #[error("degenerate set: {0}")]
    DegenerateSet(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("reference label pair does not match the target label pair")]
    PairMismatch,
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("schema mismatch in {path}: {reason}")]
    SchemaMismatch { path: PathBuf, reason: String },
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::ConfigInvalid(msg.into())
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn schema(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::SchemaMismatch {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wraps an io error, mapping `NotFound` onto [`Error::FileNotFound`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InconsistentInstance { .. } => "InconsistentInstance",
            Error::EmptyInstanceLabel(_) => "EmptyInstanceLabel",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::ClassOutOfRange { .. } => "ClassOutOfRange",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::EpochOutOfRange { .. } => "EpochOutOfRange",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::NoInstances => "NoInstances",
            Error::DegenerateSet(_) => "DegenerateSet",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::PairMismatch => "PairMismatch",
            Error::CorruptFile { .. } => "CorruptFile",
            Error::SchemaMismatch { .. } => "SchemaMismatch",
            Error::FileNotFound(_) => "FileNotFound",
            Error::Io { .. } => "Io",
        }
    }
}
