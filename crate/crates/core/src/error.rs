use thiserror::Error;

pub type Result<T> = std::result::Result<T, MfgError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MfgError {
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("grid mismatch between operands")]
    GridMismatch,
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("domain too small: {0}")]
    DomainTooSmall(String),
    #[error("structure violation: {0}")]
    StructureViolation(String),
    #[error("kernel too wide: support {support} points exceeds grid of {n_points}")]
    KernelTooWide { support: usize, n_points: usize },
    #[error("unsupported branching factor {0} (expected 2 or 3)")]
    UnsupportedBranching(usize),
    #[error("incomplete child values at epoch {epoch}: {detail}")]
    IncompleteValues { epoch: usize, detail: String },
    #[error("unstable step: courant number {courant:.4} exceeds {limit}")]
    UnstableStep { courant: f64, limit: f64 },
    #[error("trajectory left the grid at x = {x} (t = {t})")]
    DomainExit { x: f64, t: f64 },
    #[error("trajectory not adapted to the tree: {0}")]
    NotAdapted(String),
    #[error("fixed point did not converge after {iterations} iterations (last residual {last_residual:e})")]
    FixedPointFailure { iterations: usize, last_residual: f64, history: Vec<f64> },
    #[error("trees cannot be embedded: {0}")]
    Embedding(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
