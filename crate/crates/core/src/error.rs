use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A linear predictor or intermediate quantity left the domain of the link.
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("working covariance of cluster {cluster} is singular")]
    SingularCovariance { cluster: u64 },

    #[error("{what} is singular (condition number {condition:.3e})")]
    Singular { what: String, condition: f64 },

    #[error(
        "{what} is singular (condition number {condition:.3e}) even after ridge regularization; \
         recruit a larger pilot sample"
    )]
    SingularRbar { what: String, condition: f64 },

    #[error("design Gram matrix is rank deficient (lambda_min = {lambda_min:.3e}); more data is required")]
    RankDeficient { lambda_min: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no variables selected by the shrinkage step")]
    NoVariablesSelected,

    #[error("candidate pool exhausted")]
    PoolExhausted,

    #[error("cluster at pool index {0} is already recruited")]
    AlreadyRecruited(usize),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the numerical state of a fit rather than by
    /// malformed inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalDomain(_)
                | Error::SingularCovariance { .. }
                | Error::Singular { .. }
                | Error::SingularRbar { .. }
                | Error::RankDeficient { .. }
                | Error::NoVariablesSelected
        )
    }
}
