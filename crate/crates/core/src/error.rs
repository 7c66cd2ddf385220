//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid cell: {0}")]
    InvalidCell(String),
    #[error("infeasible stoichiometry: {total} atoms requested for {positions} positions")]
    InfeasibleStoichiometry { total: usize, positions: usize },
    #[error("singular separation: r = {0}")]
    SingularSeparation(f64),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cell is not charge neutral (net charge {0})")]
    ChargedCell(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid move: {0}")]
    InvalidMove(String),
    #[error("no valid move: {0}")]
    NoValidMove(String),
    #[error("invalid temperature {0}")]
    InvalidTemperature(f64),
    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("enumeration budget exceeded: {size} states > budget {budget}")]
    BudgetExceeded { size: String, budget: u64 },
    #[error("undefined optimality gap: ground-state energy is zero")]
    UndefinedGap,
    #[error("invalid file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
