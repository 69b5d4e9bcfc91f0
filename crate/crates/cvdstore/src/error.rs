use thiserror::Error;

/// Errors surfaced by the store, engine and partitioner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("primary key constraint violated: {0}")]
    Constraint(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unknown version v{0}")]
    MissingVersion(u32),
    #[error("store corruption: {0}")]
    Corruption(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("storage budget {gamma} is below the minimum feasible storage {min}")]
    InfeasibleBudget { gamma: u64, min: u64 },
    #[error("instance too large for exhaustive search: {0} versions")]
    Scale(usize),
    #[error("empty scope")]
    EmptyScope,
    #[error("staging entry '{0}' already exists")]
    StagingConflict(String),
    #[error("table '{0}' has no recorded parent versions")]
    OrphanTable(String),
    #[error("scheme invariant violated: {0}")]
    InvariantViolation(String),
    #[error("version sets of old and new schemes are inconsistent: {0}")]
    Consistency(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("simulated crash")]
    InjectedCrash,
    #[error("cvd is locked by another writer")]
    Locked,
}

pub type Result<T> = std::result::Result<T, Error>;
