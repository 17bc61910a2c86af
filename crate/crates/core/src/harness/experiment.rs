use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{generate_dataset, Dataset, DatasetKind, DatasetSpec};
use super::ensemble::{model_seed, replace_then_finetune, train_ensemble_with, train_shadow_ensemble, with_workers, EnsembleMember};
use super::train::{EpsilonRecord, EvalRecord, PrivacyConfig, TrainConfig};
use super::HarnessError;
use crate::attacks::{attack_fold, make_shadow_plan, summarize_folds, AttackKind, CvReport, EnsembleOutputs};
use crate::nets::{Activation, BlockSpec, ModelSpec};
use crate::seed::{self, stream};
use crate::solvers::SolverConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Samples the shadow plan splits between models.
    pub n_pool: usize,
    /// Held-out samples no model trains on (test set and attack population).
    pub n_population: usize,
    pub noise: f64,
}

/// A model shape without data-dependent sizes or seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub state_dim: usize,
    pub augment_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_conditioning: bool,
    pub blocks: Vec<BlockSpec>,
}

impl ArchConfig {
    pub fn to_spec(&self, input_dim: usize, classes: usize, seed: u64) -> ModelSpec {
        ModelSpec {
            input_dim,
            state_dim: self.state_dim,
            augment_dim: self.augment_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            time_conditioning: self.time_conditioning,
            classes,
            blocks: self.blocks.clone(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub label: String,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub privacy: Option<PrivacyConfig>,
}

/// Replace-then-finetune applied to every model of the `base` entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneEntry {
    pub label: String,
    pub base: String,
    pub solver: SolverConfig,
    pub full_finetune: bool,
    pub train: TrainConfig,
    pub privacy: Option<PrivacyConfig>,
}

/// Every seed in a run derives from `master_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub master_seed: u64,
    pub data: DataConfig,
    pub n_models: usize,
    pub attacks: Vec<AttackKind>,
    pub fpr_targets: Vec<f64>,
    pub models: Vec<ModelEntry>,
    pub finetune: Vec<FinetuneEntry>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n_models < 2 || self.n_models % 2 != 0 {
            return bad(format!("n_models must be even and at least 2, got {}", self.n_models));
        }
        if let Some(f) = self.fpr_targets.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return bad(format!("FPR target {f} is outside (0, 1)"));
        }
        let mut labels: Vec<&str> = self.models.iter().map(|m| m.label.as_str()).collect();
        labels.extend(self.finetune.iter().map(|f| f.label.as_str()));
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("duplicate label {:?}", w[0]));
        }
        for f in &self.finetune {
            if !self.models.iter().any(|m| m.label == f.base) {
                return bad(format!("finetune entry {:?} names unknown base {:?}", f.label, f.base));
            }
            f.solver.validate().map_err(|e| HarnessError::Config(format!("{}: {e}", f.label)))?;
        }
        for m in &self.models {
            m.arch
                .to_spec(2, 2, 0)
                .validate()
                .map_err(|e| HarnessError::Config(format!("{}: {e}", m.label)))?;
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.data.kind.clone(),
            n_train: self.data.n_pool,
            n_test: self.data.n_population,
            noise: self.data.noise,
            seed: seed::derive_seed(self.master_seed, stream::DATA, 0),
        }
    }

    pub fn plan_seed(&self) -> u64 {
        seed::derive_seed(self.master_seed, stream::PLAN, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: usize,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub generalization_gap: f64,
    pub epochs_run: usize,
    pub iterations: u64,
    pub stopped_early: bool,
    pub final_eval: usize,
    pub evals: Vec<EvalRecord>,
    pub privacy: Vec<EpsilonRecord>,
    pub privacy_note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub label: String,
    /// `"train"` or `"finetune"`.
    pub source: String,
    pub attack: String,
    pub config_sha256: String,
    pub entry_sha256: String,
    pub master_seed: u64,
    pub data_seed: u64,
    pub plan_seed: u64,
    pub data: DataConfig,
    /// The resolved entry (`ModelEntry` or `FinetuneEntry`) as JSON.
    pub entry: serde_json::Value,
    pub spec: ModelSpec,
    pub models: Vec<ModelSummary>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub generalization_gap: f64,
    pub result: CvReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub label: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<Failure>,
}

fn sha256_json<T: Serialize>(v: &T) -> String {
    let text = serde_json::to_string(v).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn summaries(members: &[EnsembleMember]) -> Vec<ModelSummary> {
    members
        .iter()
        .enumerate()
        .map(|(m, mem)| ModelSummary {
            model: m,
            seed: mem.seed,
            train_accuracy: mem.log.train_accuracy,
            test_accuracy: mem.log.test_accuracy,
            generalization_gap: mem.log.generalization_gap,
            epochs_run: mem.log.epochs_run,
            iterations: mem.log.iterations,
            stopped_early: mem.log.stopped_early,
            final_eval: mem.log.final_eval,
            evals: mem.log.evals.clone(),
            privacy: mem.log.privacy.clone(),
            privacy_note: mem.log.privacy_note.clone(),
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct Trained {
    label: String,
    source: &'static str,
    entry: serde_json::Value,
    members: Vec<EnsembleMember>,
    outputs: EnsembleOutputs,
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

#[derive(Serialize)]
struct Timing<'a> {
    label: &'a str,
    stage: &'a str,
    seconds: f64,
}

/// Runs every model and finetune entry as a shadow ensemble, attacks each
/// with every configured attack (all folds), and writes `records.jsonl`,
/// `outputs/<label>.json` (model outputs the attacks consumed), `roc/*.csv`, `summary.md` and `timings.jsonl` under `out_dir`. Entries
/// that fail are listed in `failures.json`; the others are still written.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let roc_dir = out_dir.join("roc");
    fs::create_dir_all(&roc_dir).map_err(|e| HarnessError::io(&roc_dir, e))?;
    let data_spec = cfg.dataset_spec();
    let data: Dataset = generate_dataset(&data_spec)?;
    let plan = make_shadow_plan(data.train.len(), cfg.n_models, cfg.plan_seed())?;
    let config_sha = sha256_json(cfg);
    let mut timings = String::new();
    let mut time = |label: &str, stage: &str, start: Instant| {
        let t = Timing {
            label,
            stage,
            seconds: start.elapsed().as_secs_f64(),
        };
        timings.push_str(&serde_json::to_string(&t).expect("timing serializes"));
        timings.push('\n');
    };

    let mut summary = RunSummary::default();
    let mut trained: Vec<Trained> = Vec::new();
    for entry in &cfg.models {
        let start = Instant::now();
        let spec = entry.arch.to_spec(data.input_dim(), data.classes, 0);
        match train_shadow_ensemble(&plan, &spec, &entry.train, &data, cfg.master_seed, entry.privacy.as_ref()) {
            Ok((members, outputs)) => trained.push(Trained {
                label: entry.label.clone(),
                source: "train",
                entry: serde_json::to_value(entry).expect("entry serializes"),
                members,
                outputs,
            }),
            Err(e) => summary.failures.push(Failure {
                label: entry.label.clone(),
                error: e.to_string(),
            }),
        }
        time(&entry.label, "train", start);
    }
    for entry in &cfg.finetune {
        let start = Instant::now();
        let Some(base) = trained.iter().find(|t| t.label == entry.base) else {
            summary.failures.push(Failure {
                label: entry.label.clone(),
                error: format!("base {:?} did not train", entry.base),
            });
            continue;
        };
        let result = train_ensemble_with(&plan, &data, |m, own| {
            let b = &base.members[m];
            let seed = seed::derive_seed(model_seed(cfg.master_seed, m), stream::MODEL, 1);
            let mut solver = entry.solver.clone();
            solver.noise_seed = seed;
            let out = replace_then_finetune(&b.spec, &b.params, solver, seed, entry.full_finetune, own, &entry.train, entry.privacy.as_ref())?;
            Ok(EnsembleMember {
                spec: out.spec,
                params: out.outcome.params,
                log: out.outcome.log,
                seed,
            })
        });
        match result {
            Ok((members, outputs)) => trained.push(Trained {
                label: entry.label.clone(),
                source: "finetune",
                entry: serde_json::to_value(entry).expect("entry serializes"),
                members,
                outputs,
            }),
            Err(e) => summary.failures.push(Failure {
                label: entry.label.clone(),
                error: e.to_string(),
            }),
        }
        time(&entry.label, "finetune", start);
    }

    let out_dir_outputs = out_dir.join("outputs");
    fs::create_dir_all(&out_dir_outputs).map_err(|e| HarnessError::io(&out_dir_outputs, e))?;
    let mut jsonl = String::new();
    for t in &trained {
        let path = out_dir_outputs.join(format!("{}.json", t.label));
        write(&path, &serde_json::to_string(&t.outputs).expect("outputs serialize"))?;
        for &kind in &cfg.attacks {
            let start = Instant::now();
            let folds = with_workers(|| {
                (0..cfg.n_models)
                    .into_par_iter()
                    .map(|f| attack_fold(kind, &t.outputs, f, &cfg.fpr_targets))
                    .collect::<Result<Vec<_>, _>>()
            });
            let folds = match folds {
                Ok(f) => f,
                Err(e) => {
                    summary.failures.push(Failure {
                        label: format!("{}/{}", t.label, kind.name()),
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            for (r, roc) in &folds {
                let path = roc_dir.join(format!("{}__{}__fold{:02}.csv", t.label, kind.name(), r.fold));
                write(&path, &roc.curve.to_csv())?;
            }
            let report = summarize_folds(kind, folds.into_iter().map(|(r, _)| r).collect());
            let models = summaries(&t.members);
            let record = ExperimentRecord {
                experiment: cfg.name.clone(),
                label: t.label.clone(),
                source: t.source.into(),
                attack: kind.name().into(),
                config_sha256: config_sha.clone(),
                entry_sha256: sha256_json(&t.entry),
                master_seed: cfg.master_seed,
                data_seed: data_spec.seed,
                plan_seed: plan.seed,
                data: cfg.data.clone(),
                entry: t.entry.clone(),
                spec: t.members[0].spec.clone(),
                train_accuracy: mean(models.iter().map(|m| m.train_accuracy)),
                test_accuracy: mean(models.iter().map(|m| m.test_accuracy)),
                generalization_gap: mean(models.iter().map(|m| m.generalization_gap)),
                models,
                result: report,
            };
            jsonl.push_str(&serde_json::to_string(&record).expect("record serializes"));
            jsonl.push('\n');
            summary.records.push(record);
            time(&t.label, kind.name(), start);
        }
    }
    write(&out_dir.join("records.jsonl"), &jsonl)?;
    write(&out_dir.join("summary.md"), &render_summary(&summary.records, &cfg.fpr_targets))?;
    write(&out_dir.join("timings.jsonl"), &timings)?;
    let failures = out_dir.join("failures.json");
    if summary.failures.is_empty() {
        if failures.exists() {
            fs::remove_file(&failures).map_err(|e| HarnessError::io(&failures, e))?;
        }
    } else {
        write(&failures, &serde_json::to_string_pretty(&summary.failures).expect("failures serialize"))?;
    }
    Ok(summary)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Markdown table: accuracies, generalization gap and attack metrics (percent).
pub fn render_summary(records: &[ExperimentRecord], fpr_targets: &[f64]) -> String {
    let keys: Vec<String> = fpr_targets.iter().map(|f| f.to_string()).collect();
    let mut s = String::from("| Model | Train acc | Test acc | Gap | Attack | AUC |");
    for k in &keys {
        let _ = write!(s, " TPR@{}% FPR |", pct(k.parse().unwrap_or(0.0)));
    }
    s.push_str(" Inference acc |\n|---|---|---|---|---|---|");
    s.push_str(&"---|".repeat(keys.len()));
    s.push_str("---|\n");
    for r in records {
        let _ = write!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.label,
            pct(r.train_accuracy),
            pct(r.test_accuracy),
            pct(r.generalization_gap),
            r.attack,
            pct(r.result.mean_auc)
        );
        let tpr: &BTreeMap<String, f64> = &r.result.mean_tpr_at;
        for k in &keys {
            let _ = write!(s, " {} |", tpr.get(k).map_or_else(|| "-".into(), |v| pct(*v)));
        }
        let _ = writeln!(s, " {} |", pct(r.result.mean_accuracy));
    }
    s
}
