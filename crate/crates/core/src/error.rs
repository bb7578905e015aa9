use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A pointwise operation left its domain, e.g. `log` of a non-positive value.
    #[error("domain error on cylinder {cylinder}: {message}")]
    Domain { cylinder: String, message: String },

    /// A computation would exceed the configured size cap.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// An iterative method did not reach its tolerance.
    #[error("numerical failure: {message} (last residual {residual:e})")]
    Numerical { message: String, residual: f64 },

    /// The input lacks the structure a method relies on (primitivity, full support, rank).
    #[error("structural error: {0}")]
    Structural(String),

    /// Caller supplied inconsistent arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// Chart coordinates left the region where the chart is well conditioned.
    #[error("chart boundary: {0}")]
    ChartBoundary(String),

    /// A discretization was too coarse to meet its accuracy target.
    #[error("accuracy error: {0}")]
    Accuracy(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>, residual: f64) -> Self {
        Error::Numerical { message: msg.into(), residual }
    }

    /// True for failures caused by numerical accuracy rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. } | Error::Accuracy(_) | Error::ChartBoundary(_) | Error::Structural(_)
        )
    }
}
