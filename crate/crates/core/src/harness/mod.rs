//! Datasets, training loops and defenses, shadow ensembles and the experiment runner.

mod data;
mod ensemble;
mod experiment;
mod train;

pub use data::{generate_dataset, Dataset, DatasetKind, DatasetSpec, Split};
pub use ensemble::{
    replace_then_finetune, train_ensemble_with, train_shadow_ensemble, worker_count, EnsembleMember, FinetuneOutcome,
    WORKERS_ENV,
};
pub use experiment::{
    render_summary, run_experiment, ArchConfig, DataConfig, ExperimentConfig, ExperimentRecord, FinetuneEntry,
    ModelEntry, ModelSummary, RunSummary,
};
pub use train::{
    dp_sgd_step, evaluate, predict_probs, train, train_nsde_private, Defense, DpSgdOutput, EpsilonRecord, EvalRecord,
    EvalResult, PrivacyConfig, TrainConfig, TrainLog, TrainOutcome, NO_GUARANTEE,
};

use thiserror::Error;

use crate::attacks::AttackError;
use crate::nets::NetError;
use crate::privacy::PrivacyError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("epoch {epoch}: {source}")]
    Training {
        epoch: usize,
        #[source]
        source: NetError,
    },
    #[error("model {index}: {source}")]
    Model {
        index: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl HarnessError {
    pub(crate) fn training(epoch: usize, source: NetError) -> Self {
        HarnessError::Training { epoch, source }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// Whether the failure stems from invalid configuration rather than a run.
    pub fn is_config(&self) -> bool {
        match self {
            HarnessError::Config(_) | HarnessError::Data(_) => true,
            HarnessError::Net(NetError::InvalidSpec(_)) => true,
            HarnessError::Model { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
