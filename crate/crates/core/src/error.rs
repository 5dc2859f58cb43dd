use thiserror::Error;

/// Errors raised by the geometry, interpolation, model and training routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("vector is not unit length (norm = {norm})")]
    NotUnit { norm: f64 },

    #[error("singular configuration: {0}")]
    SingularConfiguration(String),

    #[error("empty request: {0}")]
    EmptyRequest(String),

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("singular normalization: sum of cosines is {sum:e}")]
    SingularNormalization { sum: f64 },

    #[error("anchor {index} has a zero-norm embedding")]
    DegenerateEmbedding { index: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("feature vector has zero norm")]
    DegenerateFeature,

    #[error("regressor output has zero norm")]
    DegeneratePrediction,

    #[error("nonpositive contrastive denominator for sample {index}")]
    NonpositiveDenominator { index: usize },

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFinite { step: usize, breakdown: String },

    #[error("rank correlation undefined: {0}")]
    UndefinedRank(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed document: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by a numerically singular configuration.
    pub fn is_singular(&self) -> bool {
        matches!(
            self,
            Error::SingularConfiguration(_)
                | Error::SingularNormalization { .. }
                | Error::DegenerateEmbedding { .. }
                | Error::DegenerateFeature
                | Error::DegeneratePrediction
                | Error::NonpositiveDenominator { .. }
                | Error::NonFinite { .. }
                | Error::UndefinedRank(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
