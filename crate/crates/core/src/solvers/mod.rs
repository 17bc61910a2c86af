//! Time integrators for NODE and NSDE blocks.
//!
//! Every solver records its steps on the caller's [`Tape`], so gradients come
//! from differentiating the unrolled discretization. Noise draws enter the tape
//! as constants and step sizes as plain scalars: neither is differentiated.

mod dopri5;
mod fixed;

pub use dopri5::dopri5_solve;
pub use fixed::{ode_solve, sde_solve, sde_solve_seeded, sde_solve_with_noise};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdError, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("state became non-finite at step {step} (t = {time})")]
    Divergence { step: usize, time: f64 },
    #[error("step size {dt:e} underflowed at t = {time}; problem looks stiff")]
    Stiffness { time: f64, dt: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("diffusion scale must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
    EulerMaruyama,
    StochasticRk4,
}

impl Method {
    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::EulerMaruyama | Method::StochasticRk4)
    }

    /// Deterministic method with the same drift update.
    pub fn drift_counterpart(self) -> Method {
        match self {
            Method::EulerMaruyama => Method::Euler,
            Method::StochasticRk4 => Method::Rk4,
            m => m,
        }
    }
}

/// Integrator options.
///
/// `steps_per_unit` is `s`: the fixed step is `1/s` and fixed-step methods take
/// `T·s` steps. The diffusion scale is derived as `σ = k·√(s/T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub t_end: f64,
    pub steps_per_unit: u32,
    pub rtol: f64,
    pub atol: f64,
    pub stochasticity: f64,
    pub noise_seed: u64,
}

impl SolverConfig {
    pub fn fixed(method: Method, t_end: f64, steps_per_unit: u32) -> Self {
        Self {
            method,
            t_end,
            steps_per_unit,
            rtol: 1e-5,
            atol: 1e-5,
            stochasticity: 0.0,
            noise_seed: 0,
        }
    }

    pub fn dopri5(t_end: f64, rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::fixed(Method::Dopri5, t_end, 1)
        }
    }

    /// Stochastic config with `k` chosen so that `sigma()` equals `sigma`.
    pub fn with_sigma(method: Method, t_end: f64, steps_per_unit: u32, sigma: f64) -> Self {
        let k = sigma * (t_end / f64::from(steps_per_unit)).sqrt();
        Self {
            stochasticity: k,
            ..Self::fixed(method, t_end, steps_per_unit)
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(SolverError::Config(format!(
                "integration interval must be positive, got {}",
                self.t_end
            )));
        }
        if self.steps_per_unit == 0 {
            return Err(SolverError::Config("steps per unit time must be positive".into()));
        }
        if self.method == Method::Dopri5 {
            if !(self.rtol > 0.0 && self.atol > 0.0) {
                return Err(SolverError::Config("rtol and atol must be positive".into()));
            }
        } else {
            self.n_steps()?;
        }
        if self.stochasticity < 0.0 {
            return Err(SolverError::NegativeSigma(self.stochasticity));
        }
        Ok(())
    }

    /// Number of fixed steps, `T·s`, which must be a positive integer.
    pub fn n_steps(&self) -> Result<usize, SolverError> {
        let raw = self.t_end * f64::from(self.steps_per_unit);
        let n = raw.round();
        if n < 1.0 || (raw - n).abs() > 1e-9 * raw.max(1.0) {
            return Err(SolverError::Config(format!(
                "T·s = {raw} must be a positive integer"
            )));
        }
        Ok(n as usize)
    }

    pub fn dt(&self) -> f64 {
        1.0 / f64::from(self.steps_per_unit)
    }

    pub fn sigma(&self) -> Result<f64, SolverError> {
        sigma_of(self.stochasticity, self.t_end, f64::from(self.steps_per_unit))
    }
}

/// Noise intensity `σ = k / √(T/s)`.
pub fn sigma_of(k: f64, t_end: f64, steps_per_unit: f64) -> Result<f64, SolverError> {
    if !(t_end > 0.0) || !(steps_per_unit > 0.0) {
        return Err(SolverError::Config(format!(
            "T and s must be positive, got T = {t_end}, s = {steps_per_unit}"
        )));
    }
    if k < 0.0 {
        return Err(SolverError::NegativeSigma(k));
    }
    Ok(k * (steps_per_unit / t_end).sqrt())
}

/// Right-hand side `f(h, t)` evaluated on a tape.
pub trait Drift {
    fn eval(&self, tape: &mut Tape, h: Var, t: f64) -> Result<Var, AdError>;
}

impl<F> Drift for F
where
    F: Fn(&mut Tape, Var, f64) -> Result<Var, AdError>,
{
    fn eval(&self, tape: &mut Tape, h: Var, t: f64) -> Result<Var, AdError> {
        self(tape, h, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub error_norm: f64,
    pub accepted: bool,
}

/// What a solve visited. `states[i]` is the state at `times[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveTrace {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
    /// Adaptive step log; empty for fixed-step methods.
    pub steps: Vec<StepRecord>,
    /// Wiener increments `w_i ~ N(0, Δt·I)`, one per step of a stochastic solve.
    pub noise: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub times: Vec<f64>,
    pub state_norms: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub noise_draws: usize,
}

impl SolveTrace {
    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            times: self.times.clone(),
            state_norms: self.states.iter().map(|s| s.squared_norm().sqrt()).collect(),
            steps: self.steps.clone(),
            noise_draws: self.noise.len(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("trace summary serializes")
    }

    fn record(&mut self, tape: &Tape, t: f64, h: Var) {
        self.times.push(t);
        self.states.push(tape.value(h).clone());
    }
}

fn check_finite(tape: &Tape, h: Var, step: usize, time: f64) -> Result<(), SolverError> {
    if tape.value(h).is_finite() {
        Ok(())
    } else {
        Err(SolverError::Divergence { step, time })
    }
}

/// `h + Σ (dt·cᵢ)·kᵢ`, skipping zero coefficients.
fn axpy_sum(tape: &mut Tape, h: Var, dt: f64, terms: &[(f64, Var)]) -> Result<Var, AdError> {
    let mut acc = h;
    for &(c, k) in terms {
        if c == 0.0 {
            continue;
        }
        let scaled = tape.scale(k, dt * c)?;
        acc = tape.add(acc, scaled)?;
    }
    Ok(acc)
}
