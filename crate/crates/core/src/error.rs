use thiserror::Error;

/// Errors raised across the crate. Variants carry enough context to tell
/// which stage of an analysis failed.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {asym:.3e}, allowed {allowed:.3e})")]
    NonSymmetric { asym: f64, allowed: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("design matrix is rank deficient (rank {rank} < {k} columns)")]
    RankDeficient { rank: usize, k: usize },
    #[error("dimension error: {0}")]
    DimError(String),
    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("invalid weights matrix: {0}")]
    BadWeights(String),
    #[error("covariance model does not concentrate: {0}")]
    NotConcentrating(String),
    #[error("scaling function c(rho) is unknown and could not be detected: {0}")]
    NoScaling(String),
    #[error("limit map is not injective on the orthogonal complement of e (smallest singular value {0:.3e})")]
    NotInjective(f64),
    #[error("test/model mismatch: {0}")]
    ModelMismatch(String),
    #[error("degenerate test: statistic is constant (lambda_1(B) = lambda_max(B))")]
    DegenerateTest,
    #[error("concentration direction lies in span(X)")]
    EInSpanX,
    #[error("critical value {kappa} outside the nontrivial range [{lo}, {hi})")]
    TrivialRegion { kappa: f64, lo: f64, hi: f64 },
    #[error("all weights of the quadratic form vanish")]
    AllZero,
    #[error("numerical integration did not converge (estimated error {0:.3e})")]
    IntegrationFailure(f64),
    #[error("covariance factor ill-conditioned at rho = {rho} (condition number {cond:.3e}); use a smaller rho")]
    IllConditioned { rho: f64, cond: f64 },
    #[error("premise could not be verified numerically: {0}")]
    ConditionUnverifiable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
