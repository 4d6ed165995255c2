use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("numerical failure in {quantity}: {detail}")]
    Numerical { quantity: String, detail: String },

    #[error("at iteration {k}")]
    AtIteration {
        k: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("condition violated: {0}")]
    ConditionViolated(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn numerical(quantity: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            quantity: quantity.into(),
            detail: detail.into(),
        }
    }

    /// True when the underlying cause is a numerical failure, looking
    /// through iteration wrappers.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical { .. } => true,
            Error::AtIteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
