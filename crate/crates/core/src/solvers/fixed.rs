use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    axpy_sum, check_finite, dopri5_solve, Drift, Method, SolveTrace, SolverConfig, SolverError,
};
use crate::ad::{AdError, Tape, Tensor, Var};
use crate::seed;

fn euler_step(tape: &mut Tape, f: &dyn Drift, h: Var, t: f64, dt: f64) -> Result<Var, AdError> {
    let k1 = f.eval(tape, h, t)?;
    axpy_sum(tape, h, dt, &[(1.0, k1)])
}

fn rk4_step(tape: &mut Tape, f: &dyn Drift, h: Var, t: f64, dt: f64) -> Result<Var, AdError> {
    let half = 0.5 * dt;
    let k1 = f.eval(tape, h, t)?;
    let h2 = axpy_sum(tape, h, half, &[(1.0, k1)])?;
    let k2 = f.eval(tape, h2, t + half)?;
    let h3 = axpy_sum(tape, h, half, &[(1.0, k2)])?;
    let k3 = f.eval(tape, h3, t + half)?;
    let h4 = axpy_sum(tape, h, dt, &[(1.0, k3)])?;
    let k4 = f.eval(tape, h4, t + dt)?;
    axpy_sum(
        tape,
        h,
        dt,
        &[
            (1.0 / 6.0, k1),
            (2.0 / 6.0, k2),
            (2.0 / 6.0, k3),
            (1.0 / 6.0, k4),
        ],
    )
}

fn drift_step(
    method: Method,
    tape: &mut Tape,
    f: &dyn Drift,
    h: Var,
    t: f64,
    dt: f64,
) -> Result<Var, AdError> {
    match method.drift_counterpart() {
        Method::Euler => euler_step(tape, f, h, t, dt),
        Method::Rk4 => rk4_step(tape, f, h, t, dt),
        other => unreachable!("{other:?} has no fixed drift step"),
    }
}

/// Deterministic solve of `dh/dt = f(h, t)` over `[0, T]`.
///
/// Euler: `h ← h + Δt·f(h, t)`. RK4: the classical four-stage rule.
/// Dopri5 configs are forwarded to [`dopri5_solve`].
pub fn ode_solve(
    tape: &mut Tape,
    f: &dyn Drift,
    h0: Var,
    cfg: &SolverConfig,
) -> Result<(Var, SolveTrace), SolverError> {
    cfg.validate()?;
    match cfg.method {
        Method::Dopri5 => return dopri5_solve(tape, f, h0, cfg),
        Method::EulerMaruyama | Method::StochasticRk4 => {
            return Err(SolverError::Config(format!(
                "{:?} is stochastic; use sde_solve",
                cfg.method
            )))
        }
        Method::Euler | Method::Rk4 => {}
    }
    let n = cfg.n_steps()?;
    let dt = cfg.dt();
    let s = f64::from(cfg.steps_per_unit);
    let mut trace = SolveTrace::default();
    let mut h = h0;
    trace.record(tape, 0.0, h);
    for i in 0..n {
        let t = i as f64 / s;
        h = drift_step(cfg.method, tape, f, h, t, dt)?;
        let t_next = (i + 1) as f64 / s;
        check_finite(tape, h, i + 1, t_next)?;
        trace.record(tape, t_next, h);
    }
    Ok((h, trace))
}

/// Euler–Maruyama (or RK4 drift + the same additive noise) for
/// `dh = f(h, t) dt + (σ/√T) dB_t`.
///
/// Each step adds `(σ/√T)·wᵢ` with `wᵢ ~ N(0, Δt·I)` drawn from `rng`; the draws
/// are stored in the trace and enter the tape as constants. With `σ = 0` no
/// draws are made and the solve is the deterministic counterpart exactly.
pub fn sde_solve(
    tape: &mut Tape,
    f: &dyn Drift,
    sigma: f64,
    h0: Var,
    cfg: &SolverConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, SolveTrace), SolverError> {
    let shape = tape.value(h0).shape().to_vec();
    let sqrt_dt = cfg.dt().sqrt();
    let mut draw = |_: usize| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * sqrt_dt)
            .collect();
        Tensor::new(shape.clone(), data).expect("shape matches state")
    };
    sde_solve_inner(tape, f, sigma, h0, cfg, &mut draw)
}

/// [`sde_solve`] with the noise stream seeded from `cfg.noise_seed`.
pub fn sde_solve_seeded(
    tape: &mut Tape,
    f: &dyn Drift,
    sigma: f64,
    h0: Var,
    cfg: &SolverConfig,
) -> Result<(Var, SolveTrace), SolverError> {
    let mut rng = seed::rng(cfg.noise_seed);
    sde_solve(tape, f, sigma, h0, cfg, &mut rng)
}

/// Replays a stochastic solve with previously recorded Wiener increments.
pub fn sde_solve_with_noise(
    tape: &mut Tape,
    f: &dyn Drift,
    sigma: f64,
    h0: Var,
    cfg: &SolverConfig,
    noise: &[Tensor],
) -> Result<(Var, SolveTrace), SolverError> {
    if sigma > 0.0 && noise.len() != cfg.n_steps()? {
        return Err(SolverError::Config(format!(
            "expected {} noise draws, got {}",
            cfg.n_steps()?,
            noise.len()
        )));
    }
    let mut draw = |i: usize| noise[i].clone();
    sde_solve_inner(tape, f, sigma, h0, cfg, &mut draw)
}

fn sde_solve_inner(
    tape: &mut Tape,
    f: &dyn Drift,
    sigma: f64,
    h0: Var,
    cfg: &SolverConfig,
    draw: &mut dyn FnMut(usize) -> Tensor,
) -> Result<(Var, SolveTrace), SolverError> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(SolverError::NegativeSigma(sigma));
    }
    cfg.validate()?;
    if !cfg.method.is_stochastic() {
        return Err(SolverError::Config(format!(
            "{:?} is deterministic; use ode_solve",
            cfg.method
        )));
    }
    let n = cfg.n_steps()?;
    let dt = cfg.dt();
    let s = f64::from(cfg.steps_per_unit);
    let diffusion = sigma / cfg.t_end.sqrt();
    let mut trace = SolveTrace::default();
    let mut h = h0;
    trace.record(tape, 0.0, h);
    for i in 0..n {
        let t = i as f64 / s;
        h = drift_step(cfg.method, tape, f, h, t, dt)?;
        if sigma > 0.0 {
            let w = draw(i);
            let increment = w.map(|v| diffusion * v);
            trace.noise.push(w);
            let c = tape.constant(increment);
            h = tape.add(h, c)?;
        }
        let t_next = (i + 1) as f64 / s;
        check_finite(tape, h, i + 1, t_next)?;
        trace.record(tape, t_next, h);
    }
    Ok((h, trace))
}
