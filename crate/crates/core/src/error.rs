use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion norm {norm} is not within tolerance of 1")]
    NonUnitQuaternion { norm: f64 },
    #[error("degenerate quaternion (zero norm)")]
    DegenerateQuaternion,
    #[error("focal lengths must be positive, got ({0}, {1})")]
    NonPositiveFocal(f64, f64),
    #[error("epipolar geometry is degenerate: camera centers coincide")]
    DegenerateEpipolar,
    #[error("no valid depth pixels")]
    NoValidDepth,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("backward requires a 1x1 root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable short identifier, used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonUnitQuaternion { .. } => "non_unit_quaternion",
            Error::DegenerateQuaternion => "degenerate_quaternion",
            Error::NonPositiveFocal(..) => "non_positive_focal",
            Error::DegenerateEpipolar => "degenerate_epipolar",
            Error::NoValidDepth => "no_valid_depth",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::InsufficientData(_) => "insufficient_data",
            Error::NonScalarRoot { .. } => "non_scalar_root",
            Error::NonFinite(_) => "non_finite",
            Error::UnknownParam(_) => "unknown_param",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
        }
    }
}
