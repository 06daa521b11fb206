use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Too few distinct observation times to place the requested knots.
    #[error("insufficient-support: {0}")]
    InsufficientSupport(String),

    /// Basis evaluation requested outside the knot span.
    #[error("evaluation time {t} outside knot span [{lo}, {hi}]")]
    OutsideKnotSpan { t: f64, lo: f64, hi: f64 },

    /// Least-squares design lost rank beyond the intercept aliasing.
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    /// A precondition on user-supplied values failed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A non-finite intermediate appeared while evaluating the objective.
    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    /// The Hessian at the base fit is not positive definite.
    #[error("not a strict local minimum: {0}")]
    NotStrictLocalMinimum(String),

    /// Optimization could not produce a converged result.
    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    /// A clustering has zero marginal entropy, so NMI is undefined.
    #[error("degenerate-clustering: {0}")]
    DegenerateClustering(String),

    /// Malformed or inconsistent data files.
    #[error("data error: {0}")]
    Data(String),

    /// On-disk artifact has an unsupported format version.
    #[error("archive version mismatch: {0}")]
    VersionMismatch(String),

    /// On-disk artifact failed its integrity check.
    #[error("archive integrity: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
