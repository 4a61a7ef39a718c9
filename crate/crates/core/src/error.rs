use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// The attention field is too flat to split into two regions.
    #[error("degenerate attention field: spread {spread:e} below {min:e}")]
    Degenerate { spread: f64, min: f64 },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

/// Failures while decoding the binary volume and model formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated file: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("dimensions {0:?} overflow the addressable size")]
    DimOverflow(Vec<u64>),

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("invalid field {field}: {value}")]
    InvalidField { field: &'static str, value: u64 },
}
