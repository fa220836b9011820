use thiserror::Error;

/// Errors raised by the simulation and diagnostics layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("wavevector must be nonzero with 2 or 3 integer components, got {0:?}")]
    InvalidWavevector(Vec<i32>),

    #[error("dimension must be 2 or 3, got {0}")]
    InvalidDimension(usize),

    #[error("mode set is not closed under negation: missing {0:?}")]
    NotSymmetric(Vec<i32>),

    #[error("duplicate mode {0:?}")]
    DuplicateMode(Vec<i32>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("coefficient array has length {got}, expected {expected}")]
    CoefficientLength { expected: usize, got: usize },

    #[error("field kind mismatch: {0}")]
    KindMismatch(&'static str),

    #[error("truncation target required: product has modes up to |k|_inf = {0}")]
    TruncationRequired(i32),

    #[error("empty mode set")]
    EmptyModeSet,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("blow-up at t = {t}: {reason}")]
    BlowUp { t: f64, reason: String },

    #[error("resolution guard violated: tail fraction {tail_fraction:.3e} exceeds {limit:.1e}")]
    Unresolved { tail_fraction: f64, limit: f64 },

    #[error("test-function support radius {radius} exceeds half box width {limit}")]
    SupportTooLarge { radius: f64, limit: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
