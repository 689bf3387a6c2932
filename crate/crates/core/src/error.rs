use thiserror::Error;

pub type Result<T> = std::result::Result<T, DelqError>;

#[derive(Debug, Error)]
pub enum DelqError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("P^({i})_{k} is not defined for this solution")]
    Undefined { i: usize, k: usize },

    #[error("measurability violation: {0}")]
    Measurability(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unsolvable: {0}")]
    Unsolvable(String),

    #[error("internal consistency failure: {0}")]
    Inconsistent(String),

    #[error("validation failed:\n{0}")]
    Validation(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DelqError {
    pub(crate) fn dims(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        DelqError::DimensionMismatch {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
