use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("division by a tensor containing zero at index {index}")]
    DivisionByZero { index: usize },
    #[error("{op}: argument `{arg}` has near-zero norm {norm:e}")]
    ZeroNorm {
        op: &'static str,
        arg: &'static str,
        norm: f64,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVariable,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("model `{name}` failed validation: {reason}")]
    ModelInvalid { name: String, reason: String },
    #[error("format error in {what}: {reason}")]
    Format { what: String, reason: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable snake_case tag for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => "shape",
            Error::DivisionByZero { .. } | Error::ZeroNorm { .. } => "numeric",
            Error::Empty(_) => "empty",
            Error::NonScalarLoss(_) | Error::ForeignVariable => "tape",
            Error::InvalidArgument(_) | Error::TimestepOutOfRange { .. } => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::ModelInvalid { .. } => "model_invalid",
            Error::Format { .. } => "format",
            Error::MissingFile(_) => "missing_file",
            Error::Io { .. } => "io",
            Error::Manifest(_) => "manifest",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }
}
