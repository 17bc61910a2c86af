use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use nsde_lab::attacks::{attack_fold, summarize_folds, AttackKind, EnsembleOutputs};
use nsde_lab::harness::{
    generate_dataset, render_summary, replace_then_finetune, run_experiment, train, train_nsde_private,
    train_shadow_ensemble, Dataset, DatasetSpec, ExperimentConfig, ExperimentRecord, HarnessError, PrivacyConfig,
    TrainConfig,
};
use nsde_lab::attacks::make_shadow_plan;
use nsde_lab::nets::{build_model, Checkpoint, ModelSpec};
use nsde_lab::privacy::{
    account_gdp, account_rdp, account_strong_composition, calibrate_sigma_gaussian, calibrate_sigma_sde,
    calibrate_sigma_training, epsilon_for_sigma,
};
use nsde_lab::solvers::{sigma_of, SolverConfig};

#[derive(Parser)]
#[command(name = "nsde-lab", version, about = "Neural ODE/SDE classifiers, DP calibration and membership-inference evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a JSON dataset spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Account privacy of an SDE model with this JSON privacy config.
        #[arg(long)]
        privacy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the training log (defaults to `<out>.log.json`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the shadow ensemble of one model entry of an experiment config.
    TrainEnsemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an attack over every fold of recorded ensemble outputs.
    Attack {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        attack: String,
        #[arg(long = "fpr", default_values_t = [0.001, 0.01])]
        fpr: Vec<f64>,
        #[arg(long)]
        roc_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace a checkpoint's final block with an SDE block and finetune.
    Defend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        solver: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        full: bool,
        #[arg(long)]
        privacy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gaussian-mechanism noise calibration.
    Calibrate {
        #[command(subcommand)]
        which: Calibration,
    },
    /// Compose repeated Gaussian mechanisms.
    Account {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        k: u64,
        /// Noise-to-sensitivity ratio.
        #[arg(long, conflicts_with_all = ["noise_k", "t", "s", "lipschitz"])]
        sigma_rel: Option<f64>,
        /// SDE noise parameter `k`; with `--t`, `--s`, `--lipschitz` gives `σ_rel = σ/(T·L)`.
        #[arg(long, requires_all = ["t", "s", "lipschitz"])]
        noise_k: Option<f64>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        lipschitz: Option<f64>,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1e-5)]
        delta_prime: f64,
    },
    /// Run a full experiment grid from a JSON config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a markdown summary from a records file.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long = "fpr", default_values_t = [0.001, 0.01])]
        fpr: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum Calibration {
    Gaussian {
        #[arg(long)]
        sensitivity: f64,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
    },
    Sde {
        #[arg(long)]
        t: f64,
        #[arg(long)]
        lipschitz: f64,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
    },
    Training {
        #[arg(long)]
        k: u64,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        lipschitz: f64,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        delta_prime: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    StrongComposition,
    Rdp,
    Gdp,
}

/// Failure with its exit code: 2 for configuration, 3 for runtime.
struct Fail {
    code: u8,
    message: String,
}

fn config_err(e: impl std::fmt::Display) -> Fail {
    Fail { code: 2, message: e.to_string() }
}

fn runtime_err(e: impl std::fmt::Display) -> Fail {
    Fail { code: 3, message: e.to_string() }
}

impl From<HarnessError> for Fail {
    fn from(e: HarnessError) -> Self {
        Fail {
            code: if e.is_config() { 2 } else { 3 },
            message: e.to_string(),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Fail> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Fail> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime_err(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), Fail> {
    write_text(path, &serde_json::to_string_pretty(v).expect("serializable"))
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn load_checkpoint(path: &Path) -> Result<(ModelSpec, nsde_lab::nets::Parameters), Fail> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text)
        .and_then(Checkpoint::into_parts)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Fail> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec: DatasetSpec = read_json(&spec)?;
            let data = generate_dataset(&spec)?;
            write_json(&out, &data)
        }
        Command::Train { model, train: train_cfg, data, seed, privacy, out, log } => {
            let mut spec: ModelSpec = read_json(&model)?;
            let cfg: TrainConfig = read_json(&train_cfg)?;
            let data: Dataset = read_json(&data)?;
            let privacy: Option<PrivacyConfig> = privacy.as_deref().map(read_json).transpose()?;
            spec.seed = seed;
            let init = build_model(&spec).map_err(config_err)?;
            let outcome = match &privacy {
                Some(p) => train_nsde_private(&spec, init, &data, &cfg, seed, None, p)?,
                None => train(&spec, init, &data, &cfg, seed, None)?,
            };
            let ck = Checkpoint::new(&spec, &outcome.params).map_err(runtime_err)?;
            write_text(&out, &ck.to_json())?;
            let log_path = log.unwrap_or_else(|| out.with_extension("log.json"));
            write_json(&log_path, &outcome.log)?;
            print_json(&json!({
                "train_accuracy": outcome.log.train_accuracy,
                "test_accuracy": outcome.log.test_accuracy,
                "generalization_gap": outcome.log.generalization_gap,
            }));
            Ok(())
        }
        Command::TrainEnsemble { config, label, out } => {
            let text = fs::read_to_string(&config).map_err(|e| config_err(format!("{}: {e}", config.display())))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let entry = cfg
                .models
                .iter()
                .find(|m| m.label == label)
                .ok_or_else(|| config_err(format!("no model entry labelled {label:?}")))?;
            let data = generate_dataset(&cfg.dataset_spec())?;
            let plan = make_shadow_plan(data.train.len(), cfg.n_models, cfg.plan_seed()).map_err(config_err)?;
            let spec = entry.arch.to_spec(data.input_dim(), data.classes, 0);
            let (members, outputs) =
                train_shadow_ensemble(&plan, &spec, &entry.train, &data, cfg.master_seed, entry.privacy.as_ref())?;
            for (m, mem) in members.iter().enumerate() {
                let ck = Checkpoint::new(&mem.spec, &mem.params).map_err(runtime_err)?;
                write_text(&out.join(format!("model_{m:02}.json")), &ck.to_json())?;
                write_json(&out.join(format!("model_{m:02}.log.json")), &mem.log)?;
            }
            write_json(&out.join("outputs.json"), &outputs)
        }
        Command::Attack { outputs, attack, fpr, roc_dir, out } => {
            let kind = AttackKind::parse(&attack).ok_or_else(|| config_err(format!("unknown attack {attack:?}")))?;
            let ens: EnsembleOutputs = read_json(&outputs)?;
            ens.validate().map_err(config_err)?;
            let mut folds = Vec::new();
            for t in 0..ens.plan.n_models {
                let (r, roc) = attack_fold(kind, &ens, t, &fpr).map_err(runtime_err)?;
                if let Some(dir) = &roc_dir {
                    write_text(&dir.join(format!("{}__fold{t:02}.csv", kind.name())), &roc.curve.to_csv())?;
                }
                folds.push(r);
            }
            let report = summarize_folds(kind, folds);
            write_json(&out, &report)?;
            print_json(&json!({"attack": report.attack, "auc": report.mean_auc, "tpr_at": report.mean_tpr_at}));
            Ok(())
        }
        Command::Defend { checkpoint, solver, train: train_cfg, data, seed, full, privacy, out } => {
            let (spec, params) = load_checkpoint(&checkpoint)?;
            let solver: SolverConfig = read_json(&solver)?;
            let cfg: TrainConfig = read_json(&train_cfg)?;
            let data: Dataset = read_json(&data)?;
            let privacy: Option<PrivacyConfig> = privacy.as_deref().map(read_json).transpose()?;
            let r = replace_then_finetune(&spec, &params, solver, seed, full, &data, &cfg, privacy.as_ref())?;
            let ck = Checkpoint::new(&r.spec, &r.outcome.params).map_err(runtime_err)?;
            write_text(&out, &ck.to_json())?;
            write_json(&out.with_extension("log.json"), &r.outcome.log)
        }
        Command::Calibrate { which } => {
            let v = match which {
                Calibration::Gaussian { sensitivity, epsilon, delta } => {
                    let sigma = calibrate_sigma_gaussian(sensitivity, epsilon, delta).map_err(config_err)?;
                    json!({"mechanism": "gaussian", "sigma": sigma, "sensitivity": sensitivity, "epsilon": epsilon, "delta": delta})
                }
                Calibration::Sde { t, lipschitz, epsilon, delta } => {
                    let sigma = calibrate_sigma_sde(t, lipschitz, epsilon, delta).map_err(config_err)?;
                    json!({"mechanism": "sde", "sigma": sigma, "t": t, "lipschitz": lipschitz, "epsilon": epsilon, "delta": delta})
                }
                Calibration::Training { k, t, lipschitz, epsilon, delta, delta_prime } => {
                    let c = calibrate_sigma_training(k, t, lipschitz, epsilon, delta, delta_prime).map_err(config_err)?;
                    json!({"mechanism": "training", "sigma": c.sigma, "epsilon": c.epsilon, "delta_total": c.delta_total,
                           "vacuous": c.vacuous, "k": k, "t": t, "lipschitz": lipschitz, "delta": delta, "delta_prime": delta_prime})
                }
            };
            print_json(&v);
            Ok(())
        }
        Command::Account { method, k, sigma_rel, noise_k, t, s, lipschitz, delta, delta_prime } => {
            let sigma_rel = match (sigma_rel, noise_k) {
                (Some(r), _) => r,
                (None, Some(nk)) => {
                    let (t, s, l) = (t.unwrap_or(0.0), s.unwrap_or(0.0), lipschitz.unwrap_or(0.0));
                    sigma_of(nk, t, s).map_err(config_err)? / (t * l)
                }
                (None, None) => return Err(config_err("give --sigma-rel or --noise-k with --t, --s, --lipschitz")),
            };
            let (name, epsilon, delta_total) = match method {
                Method::StrongComposition => {
                    let eps = epsilon_for_sigma(sigma_rel, delta).map_err(config_err)?;
                    let (e, d) = account_strong_composition(k, eps, delta, delta_prime).map_err(config_err)?;
                    ("strong_composition", e, d)
                }
                Method::Rdp => ("rdp", account_rdp(k, sigma_rel, delta).map_err(config_err)?.0, delta),
                Method::Gdp => ("gdp", account_gdp(k, sigma_rel, delta).map_err(config_err)?, delta),
            };
            print_json(&json!({
                "method": name,
                "epsilon": epsilon,
                "delta_total": delta_total,
                "params": {"k": k, "sigma_rel": sigma_rel, "delta": delta, "delta_prime": delta_prime},
            }));
            Ok(())
        }
        Command::Experiment { config, out } => {
            let text = fs::read_to_string(&config).map_err(|e| config_err(format!("{}: {e}", config.display())))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let summary = run_experiment(&cfg, &out)?;
            print!("{}", render_summary(&summary.records, &cfg.fpr_targets));
            if summary.failures.is_empty() {
                Ok(())
            } else {
                Err(runtime_err(format!("{} entries failed; see failures.json", summary.failures.len())))
            }
        }
        Command::Report { records, fpr } => {
            let text = fs::read_to_string(&records).map_err(|e| config_err(format!("{}: {e}", records.display())))?;
            let recs = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str::<ExperimentRecord>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(config_err)?;
            print!("{}", render_summary(&recs, &fpr));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
