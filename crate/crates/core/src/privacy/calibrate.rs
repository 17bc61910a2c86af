use serde::{Deserialize, Serialize};

use super::{require, PrivacyError};

/// Smallest `σ` for which `x + N(0, σ²)` is `(ε, δ)`-DP when `g` has
/// sensitivity `S`: `σ = √(2 ln(1.25/δ))·S/ε`.
pub fn calibrate_sigma_gaussian(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64, PrivacyError> {
    require(sensitivity >= 0.0 && sensitivity.is_finite(), || {
        format!("sensitivity must be finite and non-negative, got {sensitivity}")
    })?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(PrivacyError::OutOfRegime(epsilon));
    }
    require(delta > 0.0 && delta <= 1.25, || {
        format!("delta must lie in (0, 1.25], got {delta}")
    })?;
    Ok((2.0 * (1.25 / delta).ln()).sqrt() * sensitivity / epsilon)
}

/// Noise for an SDE block integrated over `[0, T]` with an `L`-Lipschitz drift;
/// the terminal state has sensitivity at most `T·L`.
pub fn calibrate_sigma_sde(t_end: f64, lipschitz: f64, epsilon: f64, delta: f64) -> Result<f64, PrivacyError> {
    require(t_end > 0.0 && lipschitz > 0.0, || {
        format!("T and L must be positive, got T = {t_end}, L = {lipschitz}")
    })?;
    calibrate_sigma_gaussian(t_end * lipschitz, epsilon, delta)
}

/// Per-step `ε` implied by a noise ratio under the same bound (conservative).
pub fn epsilon_for_sigma(sigma_rel: f64, delta: f64) -> Result<f64, PrivacyError> {
    require(sigma_rel > 0.0, || format!("sigma_rel must be positive, got {sigma_rel}"))?;
    require(delta > 0.0 && delta <= 1.25, || {
        format!("delta must lie in (0, 1.25], got {delta}")
    })?;
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / sigma_rel)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCalibration {
    pub sigma: f64,
    pub epsilon: f64,
    /// `K·δ + δ′`.
    pub delta_total: f64,
    /// Set when `delta_total ≥ 1`: the guarantee says nothing.
    pub vacuous: bool,
}

/// Noise making `K` training iterations `(ε′, Kδ + δ′)`-DP:
/// `σ = 4√(K ln(1.25/δ) ln(1/δ′))·T·L/ε′`.
pub fn calibrate_sigma_training(
    k_iters: u64,
    t_end: f64,
    lipschitz: f64,
    epsilon_total: f64,
    delta: f64,
    delta_prime: f64,
) -> Result<TrainingCalibration, PrivacyError> {
    require(k_iters >= 1, || "K must be at least 1".into())?;
    require(t_end > 0.0 && lipschitz > 0.0 && epsilon_total > 0.0, || {
        format!("T, L and epsilon must be positive, got {t_end}, {lipschitz}, {epsilon_total}")
    })?;
    require(delta > 0.0 && delta < 1.0 && delta_prime > 0.0 && delta_prime < 1.0, || {
        format!("delta and delta' must lie in (0, 1), got {delta}, {delta_prime}")
    })?;
    let k = k_iters as f64;
    let sigma = 4.0 * (k * (1.25 / delta).ln() * (1.0 / delta_prime).ln()).sqrt() * t_end * lipschitz
        / epsilon_total;
    let delta_total = k * delta + delta_prime;
    Ok(TrainingCalibration {
        sigma,
        epsilon: epsilon_total,
        delta_total,
        vacuous: delta_total >= 1.0,
    })
}
