use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("variable does not belong to this graph")]
    ForeignVar,

    #[error("loss must be a scalar, got shape {0}")]
    NonScalarLoss(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("parameter `{name}` has shape {found} in checkpoint, network expects {expected}")]
    ParamMismatch {
        name: String,
        expected: String,
        found: String,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("missing file {0}")]
    Missing(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::Missing(path);
        }
        Error::Io { path, source }
    }

    /// Short machine-readable category, used for `error:<category>:` lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::ParamMismatch { .. } => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::NonFinite { .. } => "numeric",
            Error::ForeignVar | Error::NonScalarLoss(_) => "graph",
            Error::Config(_) => "config",
            Error::Corrupt(_) => "corrupt",
            Error::Unsupported(_) => "format",
            Error::Diverged { .. } => "divergence",
            Error::CheckFailed(_) => "check",
            Error::Missing(_) => "missing",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for this error; distinct per category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::Config(_) => 3,
            Error::Missing(_) => 4,
            Error::Corrupt(_) => 5,
            Error::Unsupported(_) => 6,
            Error::Shape { .. } | Error::ParamMismatch { .. } => 7,
            Error::NonFinite { .. } => 8,
            Error::Diverged { .. } => 9,
            Error::Io { .. } => 10,
            Error::ForeignVar | Error::NonScalarLoss(_) => 11,
            Error::CheckFailed(_) => 12,
        }
    }
}
