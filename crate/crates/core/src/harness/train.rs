use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Split};
use super::HarnessError;
use crate::ad::{Tape, Tensor};
use crate::nets::{bind, forward_on_tape, predict, BlockKind, FinetuneMask, ModelSpec, NetError, Parameters};
use crate::privacy::{AccountMethod, AccountantState};
use crate::seed::{self, stream};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Defense {
    None,
    /// Adds `λ·Σ|w|` over weight matrices.
    L1 { lambda: f64 },
    /// Adds `λ·Σw²` over weight matrices.
    L2 { lambda: f64 },
    /// Stops after `patience` evaluations without test-loss improvement and
    /// restores the best parameters.
    EarlyStop { patience: usize },
    /// Per-example clipping to norm `clip` plus `N(0, (noise_multiplier·clip)²)`
    /// on the summed gradient. Training halts before the RDP estimate would
    /// pass `target_epsilon`.
    DpSgd {
        clip: f64,
        noise_multiplier: f64,
        target_epsilon: f64,
        delta: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub defense: Defense,
    /// Evaluate every this many epochs (the final parameters are always evaluated).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self, train_size: usize) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.batch_size == 0 || self.batch_size > train_size {
            return bad(format!("batch size {} must be in 1..={train_size}", self.batch_size));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rate must be positive and momentum in [0, 1)".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        match self.defense {
            Defense::L1 { lambda } | Defense::L2 { lambda } if !(lambda >= 0.0) => {
                bad(format!("penalty weight must be non-negative, got {lambda}"))
            }
            Defense::EarlyStop { patience: 0 } => bad("patience must be positive".into()),
            Defense::DpSgd {
                clip,
                noise_multiplier,
                delta,
                target_epsilon,
            } if !(clip > 0.0 && noise_multiplier >= 0.0 && delta > 0.0 && delta < 1.0 && target_epsilon > 0.0) => {
                bad("dp_sgd needs clip > 0, noise_multiplier ≥ 0, target_epsilon > 0 and delta in (0, 1)".into())
            }
            _ => Ok(()),
        }
    }
}

/// How private NSDE training is accounted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub method: AccountMethod,
    pub delta: f64,
    pub delta_prime: f64,
    /// Lipschitz bound `L` of the drift, so the sensitivity is `T·L`.
    pub lipschitz: f64,
    /// Count every iteration instead of one step per epoch of disjoint batches.
    pub per_iteration: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRecord {
    pub epoch: usize,
    pub steps: u64,
    pub epsilon: f64,
    pub delta_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub evals: Vec<EvalRecord>,
    /// Index into `evals` describing the returned parameters.
    pub final_eval: usize,
    pub epochs_run: usize,
    pub iterations: u64,
    pub stopped_early: bool,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `train_accuracy − test_accuracy`.
    pub generalization_gap: f64,
    pub privacy: Vec<EpsilonRecord>,
    pub privacy_note: Option<String>,
}

pub struct TrainOutcome {
    pub params: Parameters,
    pub log: TrainLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Class probabilities, evaluated in chunks. SDE noise comes from `noise_seed`.
pub fn predict_probs(spec: &ModelSpec, params: &Parameters, x: &Tensor, noise_seed: u64) -> Result<Vec<Vec<f64>>, NetError> {
    let mut rng = seed::rng(noise_seed);
    let (n, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = Tensor::new(vec![end - start, d], x.data()[start * d..end * d].to_vec())?;
        let logits = predict(params, spec, &chunk, &mut rng)?;
        out.extend((0..logits.rows()).map(|r| softmax_row(logits.row(r))));
    }
    Ok(out)
}

/// Mean cross-entropy and accuracy (ties count as wrong unless the label wins outright).
pub fn evaluate(spec: &ModelSpec, params: &Parameters, split: &Split, noise_seed: u64) -> Result<EvalResult, NetError> {
    let probs = predict_probs(spec, params, &split.x, noise_seed)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, &y) in probs.iter().zip(&split.y) {
        loss -= p[y].max(crate::ad::LOG_FLOOR).ln();
        if p.iter().enumerate().all(|(c, &q)| c == y || q < p[y]) {
            correct += 1;
        }
    }
    let n = split.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Mean cross-entropy of a batch and its gradient for every trainable tensor.
fn batch_gradient(
    spec: &ModelSpec,
    params: &Parameters,
    mask: &FinetuneMask,
    x: &Tensor,
    y: &[usize],
    noise_seed: u64,
) -> Result<(f64, Vec<Option<Tensor>>), NetError> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, Some(mask));
    let mut rng = seed::rng(noise_seed);
    let out = forward_on_tape(&mut tape, spec, &vars, x, &mut rng)?;
    let losses = tape.cross_entropy(out.logits, y)?;
    let loss = tape.mean(losses)?;
    let grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(&mask.trainable)
        .map(|(&v, &t)| t.then(|| grads.wrt(v)))
        .collect();
    Ok((tape.value(loss).item(), g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpSgdOutput {
    /// Noised mean of the clipped gradients.
    pub grad: Vec<Tensor>,
    /// Norm of every per-example contribution after clipping (each ≤ `clip`).
    pub clipped_norms: Vec<f64>,
}

/// Clips each per-example gradient to norm `clip`, sums, adds
/// `N(0, (noise_multiplier·clip)²·I)` and divides by the batch size.
/// Advances `accountant` by one step when given.
pub fn dp_sgd_step(
    per_example: &[Vec<Tensor>],
    clip: f64,
    noise_multiplier: f64,
    rng: &mut ChaCha8Rng,
    accountant: Option<&mut AccountantState>,
) -> Result<DpSgdOutput, HarnessError> {
    if !(clip > 0.0) {
        return Err(HarnessError::Config(format!("clip norm must be positive, got {clip}")));
    }
    let first = per_example
        .first()
        .ok_or_else(|| HarnessError::Config("empty batch".into()))?;
    let mut sum: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut clipped_norms = Vec::with_capacity(per_example.len());
    for g in per_example {
        let norm = g.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        clipped_norms.push(norm * scale);
        for (s, t) in sum.iter_mut().zip(g) {
            s.add_assign(&t.map(|v| v * scale));
        }
    }
    let b = per_example.len() as f64;
    let std = noise_multiplier * clip;
    let grad = sum
        .into_iter()
        .map(|s| {
            let data = s
                .data()
                .iter()
                .map(|&v| {
                    let noise = if std > 0.0 { std * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                    (v + noise) / b
                })
                .collect();
            Tensor::new(s.shape().to_vec(), data).expect("shape preserved")
        })
        .collect();
    if let Some(acc) = accountant {
        acc.step(1);
    }
    Ok(DpSgdOutput { grad, clipped_norms })
}

struct PrivateLedger {
    state: Option<AccountantState>,
    per_iteration: bool,
}

fn is_weight(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Adds the penalty gradient in place and returns the penalty value.
fn apply_penalty(defense: &Defense, params: &Parameters, grads: &mut [Option<Tensor>]) -> f64 {
    let (lambda, l1) = match *defense {
        Defense::L1 { lambda } => (lambda, true),
        Defense::L2 { lambda } => (lambda, false),
        _ => return 0.0,
    };
    let mut value = 0.0;
    for ((name, p), g) in params.names.iter().zip(&params.tensors).zip(grads.iter_mut()) {
        let Some(g) = g else { continue };
        if !is_weight(name) {
            continue;
        }
        if l1 {
            value += lambda * p.data().iter().map(|v| v.abs()).sum::<f64>();
            g.add_assign(&p.map(|v| lambda * v.signum() * f64::from(u8::from(v != 0.0))));
        } else {
            value += lambda * p.squared_norm();
            g.add_assign(&p.map(|v| 2.0 * lambda * v));
        }
    }
    value
}

fn eval_record(spec: &ModelSpec, params: &Parameters, data: &Dataset, epoch: usize, noise_seed: u64) -> Result<EvalRecord, HarnessError> {
    let tr = evaluate(spec, params, &data.train, noise_seed).map_err(|e| HarnessError::training(epoch, e))?;
    let te = evaluate(spec, params, &data.test, noise_seed).map_err(|e| HarnessError::training(epoch, e))?;
    Ok(EvalRecord {
        epoch,
        train_loss: tr.loss,
        train_accuracy: tr.accuracy,
        test_loss: te.loss,
        test_accuracy: te.accuracy,
    })
}

fn fit(
    spec: &ModelSpec,
    init: Parameters,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mask: Option<&FinetuneMask>,
    mut ledger: Option<PrivateLedger>,
) -> Result<TrainOutcome, HarnessError> {
    spec.validate()?;
    init.check_against(spec)?;
    cfg.validate(data.train.len())?;
    let mask = mask.cloned().unwrap_or_else(|| FinetuneMask::all(init.len()));
    if mask.trainable.len() != init.len() {
        return Err(HarnessError::Config("finetune mask does not match parameters".into()));
    }
    let eval_seed = seed::derive_seed(seed, stream::EVAL_NOISE, 0);
    let mut params = init;
    let mut velocity: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut evals = Vec::new();
    let mut privacy = Vec::new();
    let mut best: Option<(f64, usize, Parameters)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut iterations = 0u64;
    let mut epochs_run = 0usize;
    let mut dp_acc = match cfg.defense {
        Defense::DpSgd { noise_multiplier, delta, .. } if noise_multiplier > 0.0 => {
            Some(AccountantState::new(AccountMethod::Rdp, noise_multiplier, delta, 0.5)?)
        }
        _ => None,
    };
    let n = data.train.len();
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed::derive_seed(seed, stream::BATCH_ORDER, epoch as u64)));
        let mut batches_this_epoch = 0u64;
        for batch in order.chunks(cfg.batch_size) {
            let b = data.train.subset(batch);
            let noise_seed = seed::derive_seed(seed, stream::TRAIN_NOISE, iterations);
            let (loss, mut grads) = match cfg.defense {
                Defense::DpSgd {
                    clip,
                    noise_multiplier,
                    target_epsilon,
                    ..
                } => {
                    if let Some(acc) = &dp_acc {
                        let mut next = acc.clone();
                        next.step(1);
                        if next.spent().0 > target_epsilon {
                            stopped_early = true;
                            break 'epochs;
                        }
                    }
                    let mut per_example = Vec::with_capacity(batch.len());
                    let mut loss = 0.0;
                    for r in 0..batch.len() {
                        let one = b.subset(&[r]);
                        let (l, g) = batch_gradient(spec, &params, &mask, &one.x, &one.y, seed::derive_seed(noise_seed, stream::TRAIN_NOISE, r as u64))
                            .map_err(|e| HarnessError::training(epoch, e))?;
                        loss += l / batch.len() as f64;
                        per_example.push(g.into_iter().flatten().collect::<Vec<_>>());
                    }
                    let mut rng = seed::rng(seed::derive_seed(seed, stream::DP_SGD, iterations));
                    let out = dp_sgd_step(&per_example, clip, noise_multiplier, &mut rng, dp_acc.as_mut())?;
                    let mut it = out.grad.into_iter();
                    let grads = mask.trainable.iter().map(|&t| if t { it.next() } else { None }).collect();
                    (loss, grads)
                }
                _ => batch_gradient(spec, &params, &mask, &b.x, &b.y, noise_seed).map_err(|e| HarnessError::training(epoch, e))?,
            };
            let loss = loss + apply_penalty(&cfg.defense, &params, &mut grads);
            if !loss.is_finite() {
                return Err(HarnessError::Divergence { epoch });
            }
            for ((p, v), g) in params.tensors.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                let Some(g) = g else { continue };
                *v = v.zip(g, |vi, gi| cfg.momentum * vi + gi);
                *p = p.zip(v, |pi, vi| pi - cfg.learning_rate * vi);
            }
            if params.tensors.iter().any(|t| !t.is_finite()) {
                return Err(HarnessError::Divergence { epoch });
            }
            iterations += 1;
            batches_this_epoch += 1;
        }
        epochs_run = epoch;
        if let Some(l) = ledger.as_mut() {
            if let Some(state) = l.state.as_mut() {
                state.step(if l.per_iteration { batches_this_epoch } else { 1 });
                let (epsilon, delta_total) = state.spent();
                privacy.push(EpsilonRecord {
                    epoch,
                    steps: state.steps,
                    epsilon,
                    delta_total,
                });
            }
        }
        if let Some(acc) = &dp_acc {
            let (epsilon, delta_total) = acc.spent();
            privacy.push(EpsilonRecord {
                epoch,
                steps: acc.steps,
                epsilon,
                delta_total,
            });
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let rec = eval_record(spec, &params, data, epoch, eval_seed)?;
            if let Defense::EarlyStop { patience } = cfg.defense {
                if best.as_ref().is_none_or(|b| rec.test_loss < b.0) {
                    best = Some((rec.test_loss, evals.len(), params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                evals.push(rec);
                if since_best >= patience {
                    stopped_early = true;
                    break;
                }
            } else {
                evals.push(rec);
            }
        }
    }
    let final_eval = match best {
        Some((_, idx, p)) if stopped_early || idx + 1 != evals.len() => {
            params = p;
            idx
        }
        _ => {
            if evals.last().is_none_or(|e| e.epoch != epochs_run) {
                evals.push(eval_record(spec, &params, data, epochs_run, eval_seed)?);
            }
            evals.len() - 1
        }
    };
    let fe = &evals[final_eval];
    let log = TrainLog {
        train_accuracy: fe.train_accuracy,
        test_accuracy: fe.test_accuracy,
        generalization_gap: fe.train_accuracy - fe.test_accuracy,
        evals,
        final_eval,
        epochs_run,
        iterations,
        stopped_early,
        privacy,
        privacy_note: None,
    };
    Ok(TrainOutcome { params, log })
}

/// Mini-batch SGD with momentum on cross-entropy plus the configured defense.
/// Only tensors marked trainable in `mask` change.
pub fn train(
    spec: &ModelSpec,
    init: Parameters,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mask: Option<&FinetuneMask>,
) -> Result<TrainOutcome, HarnessError> {
    fit(spec, init, data, cfg, seed, mask, None)
}

/// Marker recorded when an SDE block carries no noise.
pub const NO_GUARANTEE: &str = "no formal guarantee: sigma = 0";

/// Ordinary training of a model whose final block is an SDE; the diffusion
/// provides the privacy, so gradients are not noised. The accountant advances
/// once per epoch of disjoint mini-batches (or per iteration when configured),
/// with `σ_rel = σ/(T·L)`.
pub fn train_nsde_private(
    spec: &ModelSpec,
    init: Parameters,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mask: Option<&FinetuneMask>,
    privacy: &PrivacyConfig,
) -> Result<TrainOutcome, HarnessError> {
    spec.validate()?;
    let last = spec.blocks.last().expect("validated");
    if last.kind != BlockKind::Nsde {
        return Err(HarnessError::Config(
            "private training needs a stochastic final block: no diffusion, no guarantee".into(),
        ));
    }
    let solver = last.solver.as_ref().expect("validated");
    let sigma = solver.sigma().map_err(|e| HarnessError::Config(e.to_string()))?;
    if !(privacy.lipschitz > 0.0) {
        return Err(HarnessError::Config("Lipschitz bound must be positive".into()));
    }
    let state = if sigma > 0.0 {
        Some(AccountantState::new(
            privacy.method,
            sigma / (solver.t_end * privacy.lipschitz),
            privacy.delta,
            privacy.delta_prime,
        )?)
    } else {
        None
    };
    let ledger = PrivateLedger {
        state,
        per_iteration: privacy.per_iteration,
    };
    let mut out = fit(spec, init, data, cfg, seed, mask, Some(ledger))?;
    if sigma == 0.0 {
        out.log.privacy_note = Some(NO_GUARANTEE.into());
    }
    Ok(out)
}
