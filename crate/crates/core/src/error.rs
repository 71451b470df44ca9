use thiserror::Error;

/// Errors raised by the valuation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum XvaError {
    /// An argument lies outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A formula diverges at the requested input (e.g. a gamma hazard with
    /// shape below one at zero cumulative intensity).
    #[error("singular input: {0}")]
    Singular(String),

    /// A model or market condition does not hold.
    #[error("condition violated ({condition}): {detail}")]
    Condition { condition: String, detail: String },

    /// Too many simulated paths produced non-finite values.
    #[error("invalid paths: {invalid} of {total} exceed the budget of {budget}")]
    InvalidPaths {
        invalid: usize,
        total: usize,
        budget: usize,
    },

    /// Too many visited states fell outside the hull of a grid function.
    #[error("coverage error: {outside} of {visited} visited states outside the grid hull")]
    Coverage { outside: u64, visited: u64 },

    /// A finite-difference probe is too close to the grid boundary.
    #[error("margin error: {0}")]
    Margin(String),

    /// A Monte-Carlo estimate was not finite.
    #[error("non-finite estimate at node {0}")]
    NonFinite(usize),

    /// Malformed input data (CSV, binary cache).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for XvaError {
    fn from(e: std::io::Error) -> Self {
        XvaError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, XvaError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(XvaError::Domain(msg.into()))
}

pub(crate) fn condition<T>(condition: &str, detail: impl Into<String>) -> Result<T> {
    Err(XvaError::Condition {
        condition: condition.to_string(),
        detail: detail.into(),
    })
}
