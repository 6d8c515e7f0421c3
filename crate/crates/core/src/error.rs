use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("class {0} has no samples")]
    MissingClass(usize),

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("unsupported fusion variant for {op}: {variant}")]
    UnsupportedVariant {
        op: &'static str,
        variant: &'static str,
    },

    #[error("gradient angle undefined: gradient norm below threshold")]
    UndefinedAngle,
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(
        op: &'static str,
        expected: impl core::fmt::Display,
        found: impl core::fmt::Display,
    ) -> Self {
        use alloc::string::ToString;
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
