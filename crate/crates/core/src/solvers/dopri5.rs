//! Dormand–Prince 5(4) with a PI step-size controller.
//!
//! Step control runs on tensor values; only the accepted updates feed later
//! stages, so backprop sees exactly the frozen grid of accepted steps.
//! Rejected trial stages stay on the tape but never reach the output.

use super::{axpy_sum, check_finite, Drift, Method, SolveTrace, SolverConfig, SolverError, StepRecord};
use crate::ad::{Tape, Var};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

/// Fifth-order weights (equal to the last stage row; FSAL).
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];

/// Fifth minus fourth order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const ALPHA: f64 = 0.7 / 5.0;
const BETA: f64 = 0.4 / 5.0;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;
const MIN_STEP_FRACTION: f64 = 1e-12;
const MAX_STEPS: usize = 100_000;

/// Adaptive solve over `[0, T]`. The first trial step spans the whole interval.
pub fn dopri5_solve(
    tape: &mut Tape,
    f: &dyn Drift,
    h0: Var,
    cfg: &SolverConfig,
) -> Result<(Var, SolveTrace), SolverError> {
    cfg.validate()?;
    if cfg.method != Method::Dopri5 {
        return Err(SolverError::Config(format!(
            "dopri5_solve called with {:?}",
            cfg.method
        )));
    }
    let t_end = cfg.t_end;
    let mut trace = SolveTrace::default();
    let mut t = 0.0;
    let mut y = h0;
    let mut dt = t_end;
    let mut err_prev: f64 = 1.0;
    let mut k1 = f.eval(tape, y, t)?;
    trace.record(tape, t, y);

    let mut accepted = 0usize;
    while t < t_end {
        if trace.steps.len() >= MAX_STEPS {
            return Err(SolverError::Stiffness { time: t, dt });
        }
        if dt < MIN_STEP_FRACTION * t_end {
            return Err(SolverError::Stiffness { time: t, dt });
        }
        let last = t + dt >= t_end;
        if last {
            dt = t_end - t;
        }

        let mut k = [k1; 7];
        for s in 1..7 {
            let terms: Vec<(f64, Var)> = A[s].iter().copied().zip(k.iter().copied()).collect();
            let ys = axpy_sum(tape, y, dt, &terms)?;
            k[s] = f.eval(tape, ys, t + C[s] * dt)?;
        }
        // Stage 7 evaluates f at the fifth-order solution.
        let terms: Vec<(f64, Var)> = B.iter().copied().zip(k.iter().copied()).take(6).collect();
        let y_new = axpy_sum(tape, y, dt, &terms)?;

        let yv = tape.value(y).data();
        let ynv = tape.value(y_new).data();
        let n = yv.len();
        let mut sq = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (s, &w) in E.iter().enumerate() {
                if w != 0.0 {
                    e += w * tape.value(k[s]).data()[i];
                }
            }
            e *= dt;
            let sc = cfg.atol + cfg.rtol * yv[i].abs().max(ynv[i].abs());
            sq += (e / sc).powi(2);
        }
        let err = (sq / n as f64).sqrt();

        let ok = err <= 1.0 && err.is_finite();
        trace.steps.push(StepRecord {
            t,
            dt,
            error_norm: err,
            accepted: ok,
        });
        if ok {
            t = if last { t_end } else { t + dt };
            y = y_new;
            k1 = k[6];
            accepted += 1;
            check_finite(tape, y, accepted, t)?;
            trace.record(tape, t, y);
            let fac = if err == 0.0 {
                FAC_MAX
            } else {
                SAFETY * err.powf(-ALPHA) * err_prev.powf(BETA)
            };
            dt *= fac.clamp(FAC_MIN, FAC_MAX);
            err_prev = err.max(1e-4);
        } else {
            let fac = if err.is_finite() {
                (SAFETY * err.powf(-ALPHA)).clamp(FAC_MIN, 1.0)
            } else {
                FAC_MIN
            };
            dt *= fac;
        }
    }
    Ok((y, trace))
}
