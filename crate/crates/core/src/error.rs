//! Crate-wide error type with stable machine-readable codes.
//!
//! Every failure carries a short code (used by the CLI's `ERROR <code>: <detail>`
//! line and by the C API's return values) plus a human-readable detail string.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors the toolkit can produce.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor or argument had the wrong rank or dimensions.
    Shape { detail: String },
    /// Non-finite values where finite ones are required.
    Data { detail: String },
    /// An SPD solve failed even after jitter retries; names the offending tensor.
    Singular { tensor: String },
    /// A checkpoint, manifest, or dataset violated a structural invariant.
    Validation { detail: String },
    /// A merge recipe was malformed or out of documented ranges.
    Recipe { detail: String },
    /// A requested subspace rank exceeded the numerical rank available.
    Rank { detail: String },
    /// SLERP on a zero-norm parameter group.
    DegenerateGeometry { detail: String },
    /// Training diverged (NaN loss) at the given step.
    Divergence { step: usize },
    /// An on-disk container was malformed; carries the byte offset of the defect.
    Format { detail: String, offset: u64 },
    /// Filesystem failure wrapping the OS error text.
    Io { path: String, detail: String },
}

impl Error {
    /// Stable short code, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Data { .. } => "data",
            Error::Singular { .. } => "singular",
            Error::Validation { .. } => "validation",
            Error::Recipe { .. } => "recipe",
            Error::Rank { .. } => "rank",
            Error::DegenerateGeometry { .. } => "geometry",
            Error::Divergence { .. } => "divergence",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub fn shape(detail: impl Into<String>) -> Self {
        Error::Shape {
            detail: detail.into(),
        }
    }

    pub fn data(detail: impl Into<String>) -> Self {
        Error::Data {
            detail: detail.into(),
        }
    }

    pub fn validation(detail: impl Into<String>) -> Self {
        Error::Validation {
            detail: detail.into(),
        }
    }

    pub fn recipe(detail: impl Into<String>) -> Self {
        Error::Recipe {
            detail: detail.into(),
        }
    }

    pub fn rank(detail: impl Into<String>) -> Self {
        Error::Rank {
            detail: detail.into(),
        }
    }

    pub fn format(detail: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            detail: detail.into(),
            offset,
        }
    }

    pub fn io(path: impl Into<String>, err: &std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            detail: err.to_string(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { detail } => write!(f, "shape error: {detail}"),
            Error::Data { detail } => write!(f, "data error: {detail}"),
            Error::Singular { tensor } => {
                write!(f, "singular system while merging tensor '{tensor}'")
            }
            Error::Validation { detail } => write!(f, "validation error: {detail}"),
            Error::Recipe { detail } => write!(f, "recipe error: {detail}"),
            Error::Rank { detail } => write!(f, "rank error: {detail}"),
            Error::DegenerateGeometry { detail } => write!(f, "degenerate geometry: {detail}"),
            Error::Divergence { step } => write!(f, "training diverged at step {step}"),
            Error::Format { detail, offset } => {
                write!(f, "format error at byte {offset}: {detail}")
            }
            Error::Io { path, detail } => write!(f, "io error on '{path}': {detail}"),
        }
    }
}

impl std::error::Error for Error {}
