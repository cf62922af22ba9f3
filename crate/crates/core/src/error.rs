use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The case file is not valid JSON or does not match the case schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A field violates a model invariant. `path` names the offending entity,
    /// e.g. `lines[3].susceptance`.
    #[error("validation error at {path}: {message}")]
    Validation { path: String, message: String },

    #[error("network is disconnected: {0}")]
    Disconnected(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("reduced admittance matrix is singular (pivot ratio {ratio:e})")]
    SingularMatrix { ratio: f64 },

    /// Removing the line disconnects the network, so the rank-1 update
    /// denominator vanishes.
    #[error("outage of line {line} islands the network (denominator {denominator:e})")]
    Islanding { line: usize, denominator: f64 },

    #[error("inverted interval at index {index}: [{lower}, {upper}]")]
    InvertedInterval { index: usize, lower: f64, upper: f64 },

    #[error("negative radius {radius} at index {index}")]
    NegativeRadius { index: usize, radius: f64 },

    #[error("curve shape error: {0}")]
    CurveShape(String),

    #[error("value {value} outside domain [{min}, {max}]")]
    Domain { value: f64, min: f64, max: f64 },

    #[error("graph consistency error: {0}")]
    Consistency(String),

    /// NaN or infinity reached an interval. Never propagated.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("gap is undefined for non-positive reference optimum {0}")]
    NonpositiveReference(f64),

    #[error("grid search over {dim} dimensions exceeds the limit of {max}")]
    DimensionTooLarge { dim: usize, max: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }
}
