use thiserror::Error;

use crate::solver::SolveStatus;

pub type Result<T> = std::result::Result<T, CroError>;

#[derive(Debug, Error)]
pub enum CroError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver finished with status {status:?}: {detail}")]
    Solver { status: SolveStatus, detail: String },

    #[error(
        "robust inner maximization is unbounded (uncertainty set is not compact); \
         consider enabling modified_output on the PICNN: {0}"
    )]
    UnboundedSet(String),

    #[error("alpha {alpha} is too small for {m} calibration points (need alpha >= 1/(M+1))")]
    AlphaTooSmall { alpha: f64, m: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("calibration required: {0}")]
    Uncalibrated(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CroError {
    /// Numerical failures map to exit code 2 in the CLI; everything else is a usage error.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CroError::NonFinite(_)
                | CroError::Solver { .. }
                | CroError::UnboundedSet(_)
                | CroError::Training(_)
        )
    }
}
