use rayon::prelude::*;

use super::data::Dataset;
use super::train::{predict_probs, train, train_nsde_private, PrivacyConfig, TrainConfig, TrainLog, TrainOutcome};
use super::HarnessError;
use crate::attacks::{EnsembleOutputs, ModelOutputs, ShadowSplitPlan};
use crate::nets::{build_model, replace_final_block, FinetuneMask, ModelSpec, Parameters};
use crate::seed::{self, stream};
use crate::solvers::SolverConfig;

/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "NSDE_LAB_WORKERS";

pub fn worker_count() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

pub(crate) fn with_workers<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match worker_count().and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

pub struct EnsembleMember {
    pub spec: ModelSpec,
    pub params: Parameters,
    pub log: TrainLog,
    /// Seed the member was initialized and trained with.
    pub seed: u64,
}

/// Trains one model per plan column on its IN samples (`data.train` is the
/// pool, `data.test` the population) and records every model's class
/// probabilities on both sets. Models train in parallel; each owns its RNG
/// streams, so results do not depend on scheduling.
pub fn train_ensemble_with<F>(
    plan: &ShadowSplitPlan,
    data: &Dataset,
    job: F,
) -> Result<(Vec<EnsembleMember>, EnsembleOutputs), HarnessError>
where
    F: Fn(usize, &Dataset) -> Result<EnsembleMember, HarnessError> + Sync,
{
    plan.validate()?;
    if plan.n_samples() != data.train.len() {
        return Err(HarnessError::Config(format!(
            "plan covers {} samples but the pool has {}",
            plan.n_samples(),
            data.train.len()
        )));
    }
    let run = |m: usize| -> Result<(EnsembleMember, ModelOutputs), HarnessError> {
        let members = plan.members_of(m);
        if members.is_empty() {
            return Err(HarnessError::Config("model has no training samples".into()));
        }
        let own = Dataset {
            name: data.name.clone(),
            classes: data.classes,
            train: data.train.subset(&members),
            test: data.test.clone(),
        };
        let member = job(m, &own)?;
        let noise = seed::derive_seed(member.seed, stream::EVAL_NOISE, 1);
        let outputs = ModelOutputs {
            pool: predict_probs(&member.spec, &member.params, &data.train.x, noise)?,
            population: predict_probs(&member.spec, &member.params, &data.test.x, noise)?,
        };
        Ok((member, outputs))
    };
    let results: Vec<_> = with_workers(|| (0..plan.n_models).into_par_iter().map(run).collect());
    let mut members = Vec::with_capacity(results.len());
    let mut models = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        let (member, out) = r.map_err(|e| HarnessError::Model {
            index,
            source: Box::new(e),
        })?;
        members.push(member);
        models.push(Some(out));
    }
    let outputs = EnsembleOutputs {
        plan: plan.clone(),
        labels: data.train.y.clone(),
        population_labels: data.test.y.clone(),
        models,
    };
    Ok((members, outputs))
}

/// Seed of model `m` in an ensemble.
pub(crate) fn model_seed(master: u64, m: usize) -> u64 {
    seed::derive_seed(master, stream::MODEL, m as u64)
}

/// Fresh models from `spec` (seed replaced by `derive_seed(master, MODEL, m)`),
/// trained normally or, with `privacy`, through [`train_nsde_private`].
pub fn train_shadow_ensemble(
    plan: &ShadowSplitPlan,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    data: &Dataset,
    master_seed: u64,
    privacy: Option<&PrivacyConfig>,
) -> Result<(Vec<EnsembleMember>, EnsembleOutputs), HarnessError> {
    spec.validate()?;
    train_ensemble_with(plan, data, |m, own| {
        let seed = model_seed(master_seed, m);
        let spec = ModelSpec { seed, ..spec.clone() };
        let init = build_model(&spec)?;
        let out = match privacy {
            Some(p) => train_nsde_private(&spec, init, own, cfg, seed, None, p)?,
            None => train(&spec, init, own, cfg, seed, None)?,
        };
        Ok(EnsembleMember {
            spec,
            params: out.params,
            log: out.log,
            seed,
        })
    })
}

pub struct FinetuneOutcome {
    pub spec: ModelSpec,
    pub mask: FinetuneMask,
    pub outcome: TrainOutcome,
}

/// Swaps the final block of a trained model for an SDE block (initialized from
/// `seed`) and trains the new block and head, or everything with
/// `full_finetune`. With `privacy` the accountant only counts these
/// finetuning iterations.
#[allow(clippy::too_many_arguments)]
pub fn replace_then_finetune(
    spec: &ModelSpec,
    params: &Parameters,
    nsde: SolverConfig,
    seed: u64,
    full_finetune: bool,
    data: &Dataset,
    cfg: &TrainConfig,
    privacy: Option<&PrivacyConfig>,
) -> Result<FinetuneOutcome, HarnessError> {
    let r = replace_final_block(spec, params, nsde, seed, full_finetune)?;
    let outcome = match privacy {
        Some(p) => train_nsde_private(&r.spec, r.params, data, cfg, seed, Some(&r.mask), p)?,
        None => train(&r.spec, r.params, data, cfg, seed, Some(&r.mask))?,
    };
    Ok(FinetuneOutcome {
        spec: r.spec,
        mask: r.mask,
        outcome,
    })
}
