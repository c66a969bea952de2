use thiserror::Error;

/// Errors produced by the simulator and the statistical harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("wall eigenproblem unresolved at order {order}: eigenvalue {index} changes by {rel:.3e} under refinement (tolerance {tol:.1e})")]
    Resolution {
        order: usize,
        index: usize,
        rel: f64,
        tol: f64,
    },

    #[error("requested {requested} modes but only {available} are available")]
    Capacity { requested: usize, available: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("standing assumption violated: {0}")]
    StandingAssumption(String),

    #[error("trajectory diverged at t = {t}: max |u_j| = {max_abs:.3e}")]
    Divergence { t: f64, max_abs: f64 },

    #[error("quantity undefined at t = 0")]
    UndefinedTime,

    #[error("estimator undefined: accumulated enstrophy integral is zero at t = {t}")]
    UndefinedEstimator { t: f64 },

    #[error("negative time step: {0}")]
    NegativeDt(f64),

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("config hash mismatch: checkpoint was written for {expected}, current config is {got}")]
    HashMismatch { expected: String, got: String },

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("reciprocal transform undefined: zero samples at indices {0:?}")]
    ZeroSamples(Vec<usize>),

    #[error("exponential moment overflow: kappa*nu*|u|^2 = {0:.2} exceeds 50; decrease kappa")]
    KappaTooLarge(f64),

    #[error("{failed} of {total} ensemble runs failed (> 5%); first failure: {first}")]
    EnsembleFailure {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("non-positive input: {0}")]
    NonPositive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
