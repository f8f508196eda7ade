use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("invalid tangent: {0}")]
    InvalidTangent(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("base-point mismatch: {0}")]
    BasePointMismatch(String),

    /// Sphere points at (or numerically near) angle π, or a tangent vector of
    /// norm ≥ π.
    #[error("beyond injectivity guard: {0}")]
    InjectivityGuard(String),

    #[error("unknown geometry descriptor `{0}`")]
    UnknownGeometry(String),

    #[error("unknown simulation design `{0}`")]
    UnknownDesign(String),

    #[error("empty smoothing window at t={t} (h={h}): {found} distinct times")]
    EmptyWindow { t: f64, h: f64, found: usize },

    #[error("degenerate local design at t={t}: sigma0^2={sigma0_sq:e}")]
    DegenerateWindow { t: f64, sigma0_sq: f64 },

    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("insufficient pairs in window at (s,t)=({s},{t}): {pairs}")]
    InsufficientPairs { s: f64, t: f64, pairs: usize },

    #[error("near-singular local design at (s,t)=({s},{t}) with {pairs} pairs: denominator {denominator:e}")]
    SingularDesign {
        s: f64,
        t: f64,
        pairs: usize,
        denominator: f64,
    },

    #[error("at t={t}: {source}")]
    AtTime {
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {total} cells failed (first: {first})")]
    TooManyCellFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("subject {subject}: covariance not positive definite (min eigenvalue {min_eigenvalue:e}, condition {condition:e})")]
    NotPositiveDefinite {
        subject: String,
        min_eigenvalue: f64,
        condition: f64,
    },

    #[error("all bandwidth candidates failed: {0}")]
    AllCandidatesFailed(String),

    #[error("{failed} of {total} replications failed (first: {first})")]
    TooManyReplicationFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("subject {subject}: {reason}")]
    Subject { subject: String, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_time(self, t: f64) -> Self {
        Error::AtTime {
            t,
            source: Box::new(self),
        }
    }

    /// True for failures caused by malformed or out-of-contract input, as
    /// opposed to numerical breakdown during estimation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidPoint(_)
            | Error::InvalidTangent(_)
            | Error::ShapeMismatch { .. }
            | Error::BasePointMismatch(_)
            | Error::UnknownGeometry(_)
            | Error::UnknownDesign(_)
            | Error::Subject { .. }
            | Error::Invalid(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Io(_) => true,
            Error::AtTime { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
