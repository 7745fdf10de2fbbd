use thiserror::Error;

pub type Result<T> = std::result::Result<T, PptError>;

#[derive(Debug, Error)]
pub enum PptError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix not PSD: eigenvalue {min:e} below tolerance relative to largest {max:e}")]
    NotPsd { min: f64, max: f64 },

    #[error("matrix not SPD: eigenvalue ratio {0:e}")]
    NotSpd(f64),

    #[error("singular covariance matrix")]
    SingularCovariance,

    #[error("saturated full model (residual sum of squares is zero)")]
    SaturatedModel,

    #[error("null and full designs coincide")]
    DesignsCoincide,

    #[error("zero mean squared error in {0} fit (perfect interpolation; add jitter)")]
    ZeroMse(String),

    #[error("quadratic program failed: {0}")]
    Qp(String),

    #[error("optimizer did not converge within {iterations} iterations; best value {value} at {best:?}")]
    NoConvergence {
        iterations: usize,
        best: Vec<f64>,
        value: f64,
    },

    #[error("statistic returned non-finite value {value} at replicate {replicate}")]
    NonFiniteStatistic { replicate: usize, value: f64 },

    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<PptError>,
    },

    #[error("unknown statistic '{0}'")]
    UnknownStatistic(String),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
}

impl PptError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PptError::InvalidInput(msg.into())
    }
}
