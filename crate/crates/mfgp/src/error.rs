use thiserror::Error;

/// Errors produced anywhere in the model pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("duplicate space-time point within one fidelity at index {0}")]
    DuplicatePoint(usize),

    #[error("conditional variance d[{index}] = {value:.3e} is not positive (ill-conditioned kernel; consider raising jitter)")]
    NonPositiveConditionalVariance { index: usize, value: f64 },

    #[error("sparse Cholesky factorization failed at pivot {index} (matrix not positive definite)")]
    CholeskyFailure { index: usize },

    #[error("dense Cholesky factorization failed")]
    DenseCholeskyFailure,

    #[error("GLS Gramian G'K^-1G is numerically singular (condition number {cond:.3e})")]
    SingularGramian { cond: f64 },

    #[error("station {station} has (near-)constant low-fidelity series; empirical slope undefined")]
    DegenerateVariance { station: String },

    #[error("empirical rho model evaluated before fitting")]
    UnfittedEmpiricalModel,

    #[error("problem size {n} exceeds the dense-oracle cap {cap}")]
    DenseSizeExceeded { n: usize, cap: usize },

    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("schema error in {path}: {detail}")]
    SchemaError { path: String, detail: String },

    #[error("no rows found for fidelity {0}")]
    EmptyFidelity(String),

    #[error("non-finite value in {path} at data row {row}")]
    NonFiniteValue { path: String, row: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
