//! End-to-end acceptance gate. Runs every criterion, prints one line each and
//! exits non-zero if any fails or overruns its time budget.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use nsde_lab::ad::{grad_check, Tape, Tensor, Var};
use nsde_lab::attacks::{
    lira_score, modified_entropy, rmia_score, roc_metrics, song_mittal_score, song_mittal_thresholds, watson_score,
    yeom_score, AttackScores, ConfidenceRecord, LiraVariance,
};
use nsde_lab::harness::{run_experiment, ExperimentConfig, ExperimentRecord, RunSummary, WORKERS_ENV};
use nsde_lab::nets::{build_model, forward_on_tape, Activation, BlockKind, BlockSpec, ModelSpec};
use nsde_lab::privacy::{
    account_rdp, account_strong_composition, calibrate_sigma_gaussian, calibrate_sigma_sde, calibrate_sigma_training,
    gdp_delta, privacy_loss_audit, AccountMethod, AccountantState,
};
use nsde_lab::seed;
use nsde_lab::solvers::{ode_solve, sde_solve, sigma_of, Method, SolverConfig};

mod common;
use common::{
    brute_mentr, brute_threshold, close, dense_rdp, gauss_logpdf, logit, members, oracle_gdp_delta, pairwise_auc,
    probs, rel, unbiased,
};

const DIRECTIONAL: &str = include_str!("../../../configs/directional.json");

type Outcome = Result<Pass, String>;

#[derive(Default)]
struct Pass {
    detail: String,
    /// Measured runtime when wall-clock time of the closure is the wrong measure.
    seconds: Option<f64>,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Ok(Pass {
        detail: detail.into(),
        seconds: None,
    })
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Board {
    /// Criteria named on the command line; empty runs all.
    only: Vec<usize>,
    failed: Vec<usize>,
}

impl Board {
    fn wants(&self, id: usize) -> bool {
        self.only.is_empty() || self.only.contains(&id)
    }

    fn run(&mut self, id: usize, name: &str, limit_s: f64, f: impl FnOnce() -> Outcome) {
        if !self.wants(id) {
            return;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let wall = start.elapsed().as_secs_f64();
        let (ok, secs, detail) = match result {
            Ok(p) => {
                let s = p.seconds.unwrap_or(wall);
                if s <= limit_s {
                    (true, s, p.detail)
                } else {
                    (false, s, format!("{} (over the {limit_s}s budget)", p.detail))
                }
            }
            Err(e) => (false, wall, e),
        };
        println!(
            "criterion {id:>2} {:<4} {name} [{secs:.2}s / {limit_s}s] {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            self.failed.push(id);
        }
    }
}

fn calibration_exactness() -> Outcome {
    let mut n = [0usize; 3];
    for s in [0.1, 0.5, 1.0, 3.0, 10.0] {
        for eps in [0.05, 0.2, 0.5, 0.9] {
            for delta in [1e-2f64, 1e-3, 1e-5, 1e-7, 0.5] {
                let g = s * (2.0 * (1.25f64.ln() - delta.ln())).sqrt() / eps;
                let got = calibrate_sigma_gaussian(s, eps, delta).map_err(|e| e.to_string())?;
                ensure!(rel(got, g) < 1e-12, "gaussian S={s} eps={eps} delta={delta}: {got} vs {g}");
                let (t, l) = (s, 0.7);
                let sde = (2.0 * (1.25f64.ln() - delta.ln())).sqrt() * t * l / eps;
                let got = calibrate_sigma_sde(t, l, eps, delta).map_err(|e| e.to_string())?;
                ensure!(rel(got, sde) < 1e-12, "sde T={t} eps={eps} delta={delta}: {got} vs {sde}");
                n[0] += 1;
                n[1] += 1;
            }
        }
    }
    for k in [1u64, 10, 100, 1000, 10_000] {
        for eps in [0.5, 1.0, 2.0, 8.0] {
            for (delta, delta_p) in [(1e-5f64, 1e-5f64), (1e-3, 1e-6), (1e-6, 1e-2), (1e-4, 1e-4), (1e-7, 1e-5)] {
                let (t, l) = (0.5, 3.0);
                let oracle = 4.0 * (k as f64 * (1.25 / delta).ln() * (1.0 / delta_p).ln()).sqrt() * t * l / eps;
                let got = calibrate_sigma_training(k, t, l, eps, delta, delta_p).map_err(|e| e.to_string())?;
                ensure!(rel(got.sigma, oracle) < 1e-12, "training K={k} eps={eps}: {} vs {oracle}", got.sigma);
                n[2] += 1;
            }
        }
    }
    ensure!(n == [100, 100, 100], "grid sizes {n:?}");
    // Quoted values are approximate; the last one is 2 units off in its final digit.
    let closed = |t: f64, eps: f64, delta: f64| (2.0 * (1.25 / delta).ln()).sqrt() * t / eps;
    let worked = [
        (calibrate_sigma_gaussian(1.0, 1.0 - 1e-12, 0.05).unwrap(), closed(1.0, 1.0 - 1e-12, 0.05), 2.537272),
        (calibrate_sigma_sde(1.0, 1.0, 0.5, 1e-5).unwrap(), closed(1.0, 0.5, 1e-5), 9.689608),
        (
            calibrate_sigma_training(100, 1.0, 1.0, 8.0, 1e-5, 1e-5).unwrap().sigma,
            4.0 * (100.0 * (1.25f64 / 1e-5).ln() * (1e5f64).ln()).sqrt() / 8.0,
            58.1196,
        ),
    ];
    for (got, oracle, quoted) in worked {
        ensure!(rel(got, oracle) < 1e-12, "{got} vs closed form {oracle}");
        ensure!(rel(got, quoted) < 1e-5, "{got} vs quoted {quoted}");
    }
    pass(format!("3x100 grid points, worked {:.6} {:.6} {:.4}", worked[0].0, worked[1].0, worked[2].0))
}

/// Two significant figures, as the ablation table prints its noise column.
fn two_sig(x: f64) -> f64 {
    let mag = 10f64.powf(x.abs().log10().floor() - 1.0);
    (x / mag).round() * mag
}

fn sigma_formula_fidelity() -> Outcome {
    // (steps per unit, T, k) -> printed noise.
    let rows = [
        (16.0, 1.0, 0.3, 1.2),
        (8.0, 1.0, 0.5, 1.4),
        (16.0, 1.0, 0.4, 1.6),
        (8.0, 0.5, 0.5, 2.0),
        (16.0, 1.0, 0.6, 2.4),
        (8.0, 0.25, 0.5, 2.8),
        (16.0, 0.25, 0.5, 4.0),
        (32.0, 0.25, 0.5, 5.7),
        (32.0, 0.125, 0.5, 8.0),
        (16.0, 1.0, 0.5, 2.0),
        (32.0, 1.0, 0.5, 2.8),
        (16.0, 0.5, 0.5, 2.8),
        (32.0, 0.5, 0.5, 4.0),
        (8.0, 0.125, 0.5, 4.0),
        (16.0, 0.125, 0.5, 5.7),
        (16.0, 0.25, 0.25, 2.0),
        (32.0, 0.5, 0.25, 2.0),
        (8.0, 0.125, 0.25, 2.0),
    ];
    let mut seen = Vec::new();
    for (s, t, k, noise) in rows {
        let sigma = sigma_of(k, t, s).map_err(|e| e.to_string())?;
        ensure!(
            (two_sig(sigma) - noise).abs() < 1e-9,
            "k={k} T={t} s={s}: {sigma} prints as {} not {noise}",
            two_sig(sigma)
        );
        if !seen.contains(&noise) {
            seen.push(noise);
        }
    }
    ensure!(seen.len() == 9, "covered {} distinct values", seen.len());
    pass(format!("{} rows, all 9 printed values", rows.len()))
}

fn privacy_audit() -> Outcome {
    let n = 1_000_000;
    let mut rng = seed::rng(2024);
    let mut worst: f64 = 0.0;
    for eps in [0.2, 0.5, 0.9] {
        for delta in [1e-2, 1e-3, 1e-5] {
            let sigma = calibrate_sigma_gaussian(1.0, eps, delta).map_err(|e| e.to_string())?;
            let r = privacy_loss_audit(sigma, 1.0, eps, delta, n, &mut rng).map_err(|e| e.to_string())?;
            ensure!(r.passed, "eps {eps} delta {delta}: exceed {} > {}", r.exceed_rate, r.threshold);
            let mean = 1.0 / (2.0 * sigma * sigma);
            let var = 1.0 / (sigma * sigma);
            let z_mean = (r.loss_mean - mean).abs() / (var / n as f64).sqrt();
            let z_var = (r.loss_variance - var).abs() / (var * (2.0 / n as f64).sqrt());
            ensure!(z_mean < 5.0 && z_var < 5.0, "eps {eps} delta {delta}: z {z_mean:.2} {z_var:.2}");
            worst = worst.max(z_mean).max(z_var);
        }
    }
    let mut failures = 0;
    for eps in [0.2, 0.5, 0.9] {
        for delta in [1e-2, 1e-3, 1e-5] {
            let sigma = calibrate_sigma_gaussian(1.0, eps, delta).unwrap() / 2.0;
            if !privacy_loss_audit(sigma, 1.0, eps, delta, n, &mut rng).unwrap().passed {
                failures += 1;
            }
        }
    }
    ensure!(failures >= 1, "halved noise never failed the audit");
    pass(format!("9/9 calibrated pass, max z {worst:.2}, halved sigma fails {failures}/9"))
}

fn solve_decay(method: Method, s: u32) -> f64 {
    let decay = |tape: &mut Tape, h: Var, _t: f64| tape.scale(h, -1.0);
    let mut tape = Tape::new();
    let h = tape.leaf(Tensor::scalar(1.0));
    let cfg = match method {
        Method::Dopri5 => SolverConfig::dopri5(1.0, 1e-6, 1e-6),
        m => SolverConfig::fixed(m, 1.0, s),
    };
    let (out, _) = ode_solve(&mut tape, &decay, h, &cfg).unwrap();
    (tape.value(out).item() - (-1.0f64).exp()).abs()
}

/// Least-squares slope of `ln err` against `ln Δt`.
fn slope(method: Method, steps: &[u32]) -> f64 {
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .map(|&s| ((1.0 / s as f64).ln(), solve_decay(method, s).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn solver_orders() -> Outcome {
    let euler = slope(Method::Euler, &[16, 32, 64, 128, 256]);
    let rk4 = slope(Method::Rk4, &[4, 8, 16, 32]);
    ensure!((euler - 1.0).abs() <= 0.1, "Euler slope {euler}");
    ensure!((rk4 - 4.0).abs() <= 0.3, "RK4 slope {rk4}");
    let err = solve_decay(Method::Dopri5, 0);
    ensure!(err <= 100.0 * 1e-6, "Dopri5 error {err}");
    pass(format!("Euler {euler:.3}, RK4 {rk4:.3}, Dopri5 error {err:.2e}"))
}

fn euler_maruyama_law() -> Outcome {
    let n = 100_000;
    let zero = |tape: &mut Tape, h: Var, _t: f64| tape.scale(h, 0.0);
    let mut worst: f64 = 0.0;
    for sigma in [1.0, 2.0] {
        for (t_end, s) in [(1.0, 4), (2.0, 2)] {
            let mut tape = Tape::new();
            let h0 = tape.constant(Tensor::zeros(&[n, 2]));
            let cfg = SolverConfig::fixed(Method::EulerMaruyama, t_end, s);
            let (out, _) = sde_solve(&mut tape, &zero, sigma, h0, &cfg, &mut seed::rng(31)).map_err(|e| e.to_string())?;
            let x = tape.value(out);
            let (mut m, mut c) = ([0.0; 2], [[0.0; 2]; 2]);
            for i in 0..n {
                let r = x.row(i);
                for a in 0..2 {
                    m[a] += r[a] / n as f64;
                }
            }
            for i in 0..n {
                let r = x.row(i);
                for a in 0..2 {
                    for b in 0..2 {
                        c[a][b] += (r[a] - m[a]) * (r[b] - m[b]) / (n - 1) as f64;
                    }
                }
            }
            let s2 = sigma * sigma;
            let z_var = (0..2).map(|a| (c[a][a] - s2).abs() / (s2 * (2.0 / n as f64).sqrt())).fold(0.0, f64::max);
            let z_cov = c[0][1].abs() / (s2 / (n as f64).sqrt());
            ensure!(z_var < 5.0 && z_cov < 5.0, "sigma {sigma} T {t_end}: cov {c:?}");
            worst = worst.max(z_var).max(z_cov);
        }
    }
    let drift = |tape: &mut Tape, h: Var, _t: f64| {
        let a = tape.tanh(h)?;
        tape.scale(a, -0.7)
    };
    let h0 = Tensor::matrix(3, 2, vec![0.4, -1.0, 2.0, 0.1, -0.3, 0.8]).unwrap();
    for method in [Method::EulerMaruyama, Method::StochasticRk4] {
        let mut tape = Tape::new();
        let h = tape.leaf(h0.clone());
        let (a, _) = sde_solve(&mut tape, &drift, 0.0, h, &SolverConfig::fixed(method, 1.0, 8), &mut seed::rng(1))
            .map_err(|e| e.to_string())?;
        let (b, _) = ode_solve(&mut tape, &drift, h, &SolverConfig::fixed(method.drift_counterpart(), 1.0, 8))
            .map_err(|e| e.to_string())?;
        let bits = |v: Var| tape.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure!(bits(a) == bits(b), "{method:?} with sigma 0 differs from its drift solve");
    }
    pass(format!("max z {worst:.2}, sigma 0 bit-equal"))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any node to a scalar through a fixed random weighting.
fn weigh(tape: &mut Tape, v: Var, rng_seed: u64) -> Result<Var, nsde_lab::ad::AdError> {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(random_tensor(&mut seed::rng(rng_seed), &shape, -1.0, 1.0));
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn model_spec(kind: BlockKind, solver: Option<SolverConfig>, n: usize) -> ModelSpec {
    ModelSpec {
        input_dim: 2,
        state_dim: 3,
        augment_dim: 1,
        hidden: vec![5],
        activation: Activation::Tanh,
        time_conditioning: true,
        classes: 3,
        blocks: vec![BlockSpec { kind, solver }; n],
        seed: 8,
    }
}

fn gradient_integrity() -> Outcome {
    type OpFn = fn(&mut Tape, &[Var]) -> Result<Var, nsde_lab::ad::AdError>;
    let ops: Vec<(&str, Vec<(Vec<usize>, f64, f64)>, OpFn)> = vec![
        ("add", vec![(vec![3, 4], -2.0, 2.0), (vec![3, 4], -2.0, 2.0)], |t, v| {
            let r = t.add(v[0], v[1])?;
            weigh(t, r, 1)
        }),
        ("sub", vec![(vec![3, 4], -2.0, 2.0), (vec![3, 4], -2.0, 2.0)], |t, v| {
            let r = t.sub(v[0], v[1])?;
            weigh(t, r, 2)
        }),
        ("scale", vec![(vec![5], -2.0, 2.0)], |t, v| {
            let r = t.scale(v[0], -1.7)?;
            weigh(t, r, 3)
        }),
        ("mul", vec![(vec![3, 4], -2.0, 2.0), (vec![3, 4], -2.0, 2.0)], |t, v| {
            let r = t.mul(v[0], v[1])?;
            weigh(t, r, 4)
        }),
        ("matmul", vec![(vec![3, 4], -2.0, 2.0), (vec![4, 2], -2.0, 2.0)], |t, v| {
            let r = t.matmul(v[0], v[1])?;
            weigh(t, r, 5)
        }),
        ("add_row", vec![(vec![3, 4], -2.0, 2.0), (vec![4], -2.0, 2.0)], |t, v| {
            let r = t.add_row(v[0], v[1])?;
            weigh(t, r, 6)
        }),
        ("concat", vec![(vec![3, 2], -2.0, 2.0), (vec![3, 3], -2.0, 2.0)], |t, v| {
            let r = t.concat(v[0], v[1])?;
            weigh(t, r, 7)
        }),
        ("relu", vec![(vec![4, 3], -2.0, 2.0)], |t, v| {
            let r = t.relu(v[0])?;
            weigh(t, r, 8)
        }),
        ("tanh", vec![(vec![4, 3], -2.0, 2.0)], |t, v| {
            let r = t.tanh(v[0])?;
            weigh(t, r, 9)
        }),
        ("softmax", vec![(vec![4, 3], -2.0, 2.0)], |t, v| {
            let r = t.softmax(v[0])?;
            weigh(t, r, 10)
        }),
        ("log", vec![(vec![4, 3], 0.2, 3.0)], |t, v| {
            let r = t.log(v[0])?;
            weigh(t, r, 11)
        }),
        ("abs", vec![(vec![4, 3], -2.0, 2.0)], |t, v| {
            let r = t.abs(v[0])?;
            weigh(t, r, 12)
        }),
        ("sum", vec![(vec![4, 3], -2.0, 2.0)], |t, v| {
            let r = t.tanh(v[0])?;
            t.sum(r)
        }),
        ("mean", vec![(vec![4, 3], -2.0, 2.0)], |t, v| {
            let r = t.tanh(v[0])?;
            t.mean(r)
        }),
        ("squared_norm", vec![(vec![4, 3], -2.0, 2.0)], |t, v| t.squared_norm(v[0])),
        ("cross_entropy", vec![(vec![4, 3], -3.0, 3.0)], |t, v| {
            let r = t.cross_entropy(v[0], &[0, 2, 1, 2])?;
            weigh(t, r, 13)
        }),
    ];
    let mut rng = seed::rng(99);
    let mut worst: f64 = 0.0;
    for (name, shapes, f) in &ops {
        let params: Vec<Tensor> = shapes.iter().map(|(s, lo, hi)| random_tensor(&mut rng, s, *lo, *hi)).collect();
        let r = grad_check(f, &params, 1e-6, 1e-4).map_err(|e| format!("{name}: {e}"))?;
        ensure!(r.passed && r.checked > 0, "{name}: rel error {} over {} coords", r.max_rel_error, r.checked);
        worst = worst.max(r.max_rel_error);
    }

    let x = Tensor::matrix(4, 2, vec![0.3, -0.7, 1.2, 0.4, -0.9, -1.1, 0.05, 0.6]).unwrap();
    let y = [0usize, 2, 1, 0];
    let solves = [
        ("node rk4", model_spec(BlockKind::Node, Some(SolverConfig::fixed(Method::Rk4, 1.0, 2)), 2)),
        ("node euler", model_spec(BlockKind::Node, Some(SolverConfig::fixed(Method::Euler, 0.5, 4)), 1)),
        ("node dopri5", model_spec(BlockKind::Node, Some(SolverConfig::dopri5(1.0, 1e-6, 1e-6)), 1)),
        (
            "nsde em",
            model_spec(BlockKind::Nsde, Some(SolverConfig::with_sigma(Method::EulerMaruyama, 1.0, 4, 2.0)), 2),
        ),
        (
            "nsde srk4",
            model_spec(BlockKind::Nsde, Some(SolverConfig::with_sigma(Method::StochasticRk4, 1.0, 2, 1.0)), 1),
        ),
    ];
    let mut worst_solve: f64 = 0.0;
    for (name, spec) in &solves {
        let params = build_model(spec).map_err(|e| e.to_string())?;
        let r = grad_check(
            |tape: &mut Tape, vars: &[Var]| {
                let out = forward_on_tape(tape, spec, vars, &x, &mut seed::rng(5)).expect("forward");
                let ce = tape.cross_entropy(out.logits, &y)?;
                tape.mean(ce)
            },
            &params.tensors,
            1e-6,
            1e-3,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        ensure!(r.passed && r.checked > 0, "{name}: rel error {}", r.max_rel_error);
        worst_solve = worst_solve.max(r.max_rel_error);
    }
    pass(format!("{} ops max rel {worst:.1e}; {} solves max rel {worst_solve:.1e}", ops.len(), solves.len()))
}

fn attack_oracles() -> Outcome {
    let mut rng = seed::rng(7);
    for n in 2..=20 {
        let m = members(&mut rng, n);
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let s = yeom_score(&losses, &m, 0.8).map_err(|e| e.to_string())?;
        ensure!((0..n).all(|i| close(s.scores[i], 0.8 - losses[i])), "yeom n {n}");

        let target: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let outs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let s = watson_score(&target, &outs, &m).map_err(|e| e.to_string())?;
        for i in 0..n {
            let mean_out = outs[i].iter().map(|&p| logit(p)).sum::<f64>() / 3.0;
            ensure!(close(s.scores[i], logit(target[i]) - mean_out), "watson n {n} i {i}");
        }

        let classes = 3;
        let records = |rng: &mut ChaCha8Rng| -> Vec<ConfidenceRecord> {
            let mm = members(rng, n);
            (0..n)
                .map(|i| ConfidenceRecord {
                    probs: probs(rng, classes),
                    label: rng.random_range(0..classes),
                    is_member: mm[i],
                })
                .collect()
        };
        let shadow = records(&mut rng);
        let tgt = records(&mut rng);
        let thr = song_mittal_thresholds(&shadow, classes).map_err(|e| e.to_string())?;
        let pooled: Vec<(f64, bool)> = shadow.iter().map(|r| (brute_mentr(&r.probs, r.label), r.is_member)).collect();
        let pooled = brute_threshold(&pooled).ok_or("pooled threshold")?;
        for c in 0..classes {
            let own: Vec<(f64, bool)> = shadow
                .iter()
                .filter(|r| r.label == c)
                .map(|r| (brute_mentr(&r.probs, r.label), r.is_member))
                .collect();
            ensure!(close(thr[c], brute_threshold(&own).unwrap_or(pooled)), "song-mittal threshold n {n} class {c}");
        }
        let s = song_mittal_score(&tgt, &thr).map_err(|e| e.to_string())?;
        for (i, r) in tgt.iter().enumerate() {
            ensure!(close(modified_entropy(&r.probs, r.label), brute_mentr(&r.probs, r.label)), "mentr");
            ensure!(close(s.scores[i], thr[r.label] - brute_mentr(&r.probs, r.label)), "song-mittal n {n} i {i}");
        }

        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let draw = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..rng.random_range(2..8)).map(|_| shift + rng.random_range(-2.0..2.0)).collect())
                .collect()
        };
        let ins = draw(&mut rng, 1.0);
        let outs = draw(&mut rng, -1.0);
        let per = lira_score(&x, &ins, &outs, &m, LiraVariance::PerSample).map_err(|e| e.to_string())?;
        let glob = lira_score(&x, &ins, &outs, &m, LiraVariance::Global).map_err(|e| e.to_string())?;
        let fits: Vec<_> = (0..n).map(|i| (unbiased(&ins[i]), unbiased(&outs[i]))).collect();
        let gi = fits.iter().map(|f| f.0 .1).sum::<f64>() / n as f64;
        let go = fits.iter().map(|f| f.1 .1).sum::<f64>() / n as f64;
        for i in 0..n {
            let ((mi, vi), (mo, vo)) = fits[i];
            let e = gauss_logpdf(x[i], mi, vi.max(1e-6)) - gauss_logpdf(x[i], mo, vo.max(1e-6));
            ensure!(close(per.scores[i], e), "lira per-sample n {n} i {i}");
            let g = gauss_logpdf(x[i], mi, gi.max(1e-6)) - gauss_logpdf(x[i], mo, go.max(1e-6));
            ensure!(close(glob.scores[i], g), "lira global n {n} i {i}");
        }

        let k = 4;
        let refs: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let np = 15;
        let pt: Vec<f64> = (0..np).map(|_| rng.random_range(0.0..1.0)).collect();
        let pr: Vec<Vec<f64>> = (0..np).map(|_| (0..k).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let s = rmia_score(&target, &refs, &pt, &pr, 1.0, &m).map_err(|e| e.to_string())?;
        for i in 0..n {
            let rx = target[i] * k as f64 / refs[i].iter().sum::<f64>();
            let wins = (0..np)
                .filter(|&j| rx / (pt[j] * k as f64 / pr[j].iter().sum::<f64>()) >= 1.0)
                .count();
            ensure!(close(s.scores[i], wins as f64 / np as f64), "rmia n {n} i {i}");
        }
    }

    let n = 10_000;
    let m = members(&mut rng, n);
    let sep = AttackScores {
        ids: (0..n).collect(),
        scores: (0..n).map(|i| if m[i] { 1.0 + rng.random::<f64>() } else { rng.random::<f64>() }).collect(),
        is_member: m.clone(),
        ..Default::default()
    };
    let auc_sep = roc_metrics(&sep, &[0.01]).map_err(|e| e.to_string())?.auc;
    ensure!(auc_sep == 1.0, "separable AUC {auc_sep}");
    let mut perm = m;
    perm.shuffle(&mut rng);
    let shuffled = AttackScores { is_member: perm, ..sep };
    let auc_perm = roc_metrics(&shuffled, &[0.01]).map_err(|e| e.to_string())?.auc;
    ensure!((auc_perm - 0.5).abs() <= 0.02, "permuted AUC {auc_perm}");
    let small = AttackScores {
        ids: (0..20).collect(),
        scores: shuffled.scores[..20].to_vec(),
        is_member: shuffled.is_member[..20].to_vec(),
        ..Default::default()
    };
    let auc_small = roc_metrics(&small, &[0.1]).map_err(|e| e.to_string())?.auc;
    ensure!((auc_small - pairwise_auc(&small)).abs() < 1e-12, "ROC AUC disagrees with pairwise count");
    pass(format!("5 attacks on n=2..20; AUC separable {auc_sep}, permuted {auc_perm:.4}"))
}

fn epsilon_after(method: AccountMethod, k: u64, sigma: f64) -> f64 {
    let mut st = AccountantState::new(method, sigma, 1e-5, 1e-6).unwrap();
    st.step(k);
    st.spent().0
}

fn composition_accountants() -> Outcome {
    let (sc, _) = account_strong_composition(1, 0.1, 1e-6, 1e-6).map_err(|e| e.to_string())?;
    let sc_oracle = 0.1 * (2.0 * 1e6f64.ln()).sqrt() + 0.1 * (0.1f64.exp() - 1.0);
    ensure!(rel(sc, sc_oracle) < 1e-12, "strong composition {sc} vs closed form {sc_oracle}");
    ensure!((sc - 0.536170).abs() < 1e-6, "strong composition {sc} vs quoted 0.536170");
    let (rdp, _) = account_rdp(1, 1.0, 1e-5).map_err(|e| e.to_string())?;
    let dense = dense_rdp(1.0, 1.0, 1e-5);
    ensure!(rel(rdp, dense) < 1e-3, "RDP {rdp} vs dense grid {dense}");
    ensure!(rel(rdp, 5.2985) < 1e-3, "RDP {rdp} vs quoted 5.2985");
    let g0 = gdp_delta(1.0, 0.0);
    ensure!(rel(g0, oracle_gdp_delta(1.0, 0.0)) < 1e-6, "GDP delta(0) {g0} vs integrated CDF");
    ensure!(rel(g0, 0.382925) < 1e-6, "GDP delta(0) {g0} vs quoted 0.382925");
    for method in [AccountMethod::StrongComposition, AccountMethod::Rdp, AccountMethod::Gdp] {
        let ks = [1u64, 2, 5, 10, 50, 100, 1000];
        let sigmas = [0.5, 1.0, 2.0, 5.0, 10.0];
        for &s in &sigmas {
            let e: Vec<f64> = ks.iter().map(|&k| epsilon_after(method, k, s)).collect();
            ensure!(e.windows(2).all(|w| w[0] <= w[1]), "{method:?} not monotone in K at sigma {s}: {e:?}");
        }
        for &k in &ks {
            let e: Vec<f64> = sigmas.iter().map(|&s| epsilon_after(method, k, s)).collect();
            ensure!(e.windows(2).all(|w| w[0] >= w[1]), "{method:?} not monotone in sigma at K {k}: {e:?}");
        }
    }
    pass(format!("strong {sc:.7}, RDP {rdp:.4} (dense {dense:.4}), GDP delta(0) {g0:.6}"))
}

struct Run {
    summary: RunSummary,
    records_jsonl: Vec<u8>,
    /// Seconds per `(label, stage)`.
    timings: Vec<(String, String, f64)>,
}

fn run_directional(cfg: &ExperimentConfig) -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let summary = run_experiment(cfg, dir.path()).map_err(|e| e.to_string())?;
    ensure!(summary.failures.is_empty(), "entries failed: {:?}", summary.failures);
    let read = |name: &str| fs::read(dir.path().join(name)).map_err(|e| format!("{name}: {e}"));
    let timings = String::from_utf8(read("timings.jsonl")?)
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).expect("timing line");
            (
                v["label"].as_str().unwrap_or_default().to_string(),
                v["stage"].as_str().unwrap_or_default().to_string(),
                v["seconds"].as_f64().unwrap_or(f64::NAN),
            )
        })
        .collect();
    Ok(Run {
        summary,
        records_jsonl: read("records.jsonl")?,
        timings,
    })
}

impl Run {
    fn record(&self, label: &str) -> Result<&ExperimentRecord, String> {
        self.summary
            .records
            .iter()
            .find(|r| r.label == label && r.attack == "lira")
            .ok_or_else(|| format!("no LiRA record for {label}"))
    }

    fn tpr_at_1pct(&self, label: &str) -> Result<f64, String> {
        tpr_at(&self.record(label)?.result.mean_tpr_at, 0.01).ok_or_else(|| format!("{label}: no 1% FPR entry"))
    }

    fn seconds(&self, labels: &[&str]) -> f64 {
        self.timings.iter().filter(|t| labels.contains(&t.0.as_str())).map(|t| t.2).sum()
    }
}

fn tpr_at(map: &BTreeMap<String, f64>, fpr: f64) -> Option<f64> {
    map.iter().find(|(k, _)| k.parse::<f64>().ok() == Some(fpr)).map(|(_, v)| *v)
}

const BASELINES: [&str; 3] = ["residual", "node", "nsde"];

fn ordering_holds(t: [f64; 3]) -> bool {
    t[0] > t[1] && t[1] > t[2] && t[0] >= 2.0 * t[1] && t[1] >= 1.8 * t[2]
}

fn directional_risk(cfg: &ExperimentConfig, first: &Run) -> Outcome {
    let mut tprs = [0.0; 3];
    for (i, l) in BASELINES.iter().enumerate() {
        tprs[i] = first.tpr_at_1pct(l)?;
    }
    let seconds = first.seconds(&BASELINES);
    let fmt = |t: [f64; 3]| format!("residual {:.2}% > node {:.2}% > nsde {:.2}%", 100.0 * t[0], 100.0 * t[1], 100.0 * t[2]);
    if ordering_holds(tprs) {
        return Ok(Pass {
            detail: format!("{} (x{:.2}, x{:.2})", fmt(tprs), tprs[0] / tprs[1], tprs[1] / tprs[2]),
            seconds: Some(seconds),
        });
    }
    // Fall back to the median over five master seeds.
    let mut per_seed = vec![tprs];
    let mut slowest = seconds;
    for offset in 1..5 {
        let mut c = cfg.clone();
        c.master_seed = cfg.master_seed + offset;
        c.finetune.clear();
        let run = run_directional(&c)?;
        let mut t = [0.0; 3];
        for (i, l) in BASELINES.iter().enumerate() {
            t[i] = run.tpr_at_1pct(l)?;
        }
        per_seed.push(t);
        slowest = slowest.max(run.seconds(&BASELINES));
    }
    let mut med = [0.0; 3];
    for (i, m) in med.iter_mut().enumerate() {
        let mut col: Vec<f64> = per_seed.iter().map(|t| t[i]).collect();
        col.sort_by(f64::total_cmp);
        *m = col[2];
    }
    ensure!(
        ordering_holds(med),
        "seed {} gave {}; median of 5 seeds {}",
        cfg.master_seed,
        fmt(tprs),
        fmt(med)
    );
    Ok(Pass {
        detail: format!("median of 5 seeds: {} (x{:.2}, x{:.2})", fmt(med), med[0] / med[1], med[1] / med[2]),
        seconds: Some(slowest),
    })
}

fn generalization_gap(first: &Run) -> Outcome {
    let mut gaps = [0.0; 3];
    for (i, l) in BASELINES.iter().enumerate() {
        gaps[i] = first.record(l)?.generalization_gap;
    }
    let detail = format!(
        "gap residual {:.2} > node {:.2} > nsde {:.2} points",
        100.0 * gaps[0],
        100.0 * gaps[1],
        100.0 * gaps[2]
    );
    ensure!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{detail}");
    pass(detail)
}

fn replace_then_finetune(cfg: &ExperimentConfig, first: &Run) -> Outcome {
    let ft = cfg.finetune.first().ok_or("config has no finetune entry")?;
    let base = first.record(&ft.base)?;
    let tuned = first.record(&ft.label)?;
    ensure!(tuned.source == "finetune", "{} is not a finetune record", ft.label);
    let (b, t) = (first.tpr_at_1pct(&ft.base)?, first.tpr_at_1pct(&ft.label)?);
    let drop = 100.0 * (base.test_accuracy - tuned.test_accuracy);
    let detail = format!(
        "TPR@1% {:.2}% -> {:.2}%, test accuracy {:.2}% -> {:.2}% (drop {drop:.2} points)",
        100.0 * b,
        100.0 * t,
        100.0 * base.test_accuracy,
        100.0 * tuned.test_accuracy
    );
    ensure!(t <= 0.5 * b && drop <= 5.0, "{detail}");
    Ok(Pass {
        detail,
        seconds: Some(first.seconds(&[ft.base.as_str(), ft.label.as_str()])),
    })
}

fn reproducibility(cfg: &ExperimentConfig, first: &Run) -> Outcome {
    let second = run_directional(cfg)?;
    ensure!(
        second.records_jsonl == first.records_jsonl,
        "records differ ({} vs {} bytes)",
        first.records_jsonl.len(),
        second.records_jsonl.len()
    );
    pass(format!(
        "{} records, {} bytes identical",
        first.summary.records.len(),
        first.records_jsonl.len()
    ))
}

fn main() {
    std::env::set_var(WORKERS_ENV, "1");
    let only = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut board = Board {
        only,
        failed: Vec::new(),
    };
    board.run(1, "calibration exactness", 1.0, calibration_exactness);
    board.run(2, "noise formula fidelity", 1.0, sigma_formula_fidelity);
    board.run(3, "privacy loss audit", 120.0, privacy_audit);
    board.run(4, "solver convergence orders", 10.0, solver_orders);
    board.run(5, "Euler-Maruyama law", 60.0, euler_maruyama_law);
    board.run(6, "gradient integrity", 30.0, gradient_integrity);
    board.run(7, "attack oracle equivalence", 30.0, attack_oracles);
    board.run(8, "composition accountants", 5.0, composition_accountants);

    if !(9..=12).any(|id| board.wants(id)) {
        finish(&board);
        return;
    }
    let cfg = ExperimentConfig::from_json(DIRECTIONAL).expect("bundled config parses");
    let start = Instant::now();
    let first = run_directional(&cfg);
    println!(
        "directional run: {:.1}s, master seed {}, {} models per entry",
        start.elapsed().as_secs_f64(),
        cfg.master_seed,
        cfg.n_models
    );
    let with_run = |f: &dyn Fn(&Run) -> Outcome| -> Outcome {
        match &first {
            Ok(run) => f(run),
            Err(e) => Err(format!("directional run failed: {e}")),
        }
    };
    board.run(9, "membership risk ordering", 900.0, || with_run(&|r| directional_risk(&cfg, r)));
    board.run(10, "generalization gap ordering", f64::INFINITY, || with_run(&generalization_gap));
    board.run(11, "replace-then-finetune", 600.0, || with_run(&|r| replace_then_finetune(&cfg, r)));
    board.run(12, "reproducibility", f64::INFINITY, || with_run(&|r| reproducibility(&cfg, r)));

    finish(&board);
}

fn finish(board: &Board) {
    if !board.failed.is_empty() {
        println!("failed criteria: {:?}", board.failed);
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
