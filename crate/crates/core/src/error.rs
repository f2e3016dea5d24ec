use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("singular design: columns {columns:?} are collinear with earlier columns")]
    SingularDesign { columns: Vec<String> },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error(
        "optimizer did not converge within {evaluations} evaluations \
         (best profile log-likelihood {best_loglik:.6} at range {best_range:.6}, nugget fraction {best_nugget_fraction:.6})"
    )]
    Convergence { evaluations: usize, best_loglik: f64, best_range: f64, best_nugget_fraction: f64 },

    #[error("experiment {cell}: {failed} of {total} replicates failed")]
    TooManyFailures { cell: String, failed: usize, total: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for failures caused by the numbers rather than the caller's inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::SingularDesign { .. } | Error::DegenerateFit(_) | Error::Convergence { .. }
        )
    }
}
