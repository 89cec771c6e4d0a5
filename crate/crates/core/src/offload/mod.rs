//! Out-of-core execution: a byte-budgeted simulated device arena with a host
//! backing store, operator chains, a tile planner and a tiled executor whose
//! output is bit-identical to whole-image evaluation.

mod arena;
mod chain;
mod exec;
mod plan;

pub use arena::{DeviceArena, MemoryStats, Reservation, Residency, TensorHandle};
pub use chain::{receptive_field_radius, NodeId, Op, OpChain};
pub use exec::execute_tiled;
pub use plan::{plan_tiles, ChainCost, TileCost, TilePlan, UniformChainCost};

use thiserror::Error;

use crate::tensor::TensorError;

/// Environment variable that overrides the arena budget, in bytes.
pub const BUDGET_ENV: &str = "HOLOSEG_ARENA_BUDGET";

#[derive(Debug, Error)]
pub enum OffloadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("request for {requested} bytes cannot fit: budget {budget}, {resident} resident and unevictable")]
    OutOfBudget {
        requested: usize,
        budget: usize,
        resident: usize,
    },
    #[error("arena budget of {budget} bytes is below the minimal feasible budget of {minimal} bytes")]
    InfeasibleBudget { budget: usize, minimal: usize },
    #[error("receptive field is only defined for stride-1 chains")]
    StridedChain,
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("plan mismatch: {0}")]
    PlanMismatch(String),
    #[error("unknown tensor handle {0}")]
    UnknownHandle(u64),
    #[error("tensor handle {0} is pinned")]
    Pinned(u64),
    #[error("invalid {BUDGET_ENV} value {0:?}")]
    BadBudgetOverride(String),
}

/// Budget override from [`BUDGET_ENV`], if set.
pub fn budget_from_env() -> Result<Option<usize>, OffloadError> {
    match std::env::var(BUDGET_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| OffloadError::BadBudgetOverride(v)),
        Err(_) => Ok(None),
    }
}
