//! Drift networks, residual/ODE/SDE blocks and the classifiers assembled from them.

mod checkpoint;
mod drift;
mod model;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use drift::{Activation, DenseLayer, DriftNet};
pub use model::{
    bind, build_model, forward, forward_on_tape, param_count, predict, replace_final_block,
    BlockKind, BlockSpec, FinetuneMask, ForwardOutput, ModelSpec, Parameters, Replaced,
};

use thiserror::Error;

use crate::ad::AdError;
use crate::solvers::SolverError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameters do not match spec: {0}")]
    ParamMismatch(String),
    #[error("block {block}: {source}")]
    Solver {
        block: usize,
        #[source]
        source: SolverError,
    },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
