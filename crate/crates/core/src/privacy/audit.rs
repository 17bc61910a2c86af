use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{require, PrivacyError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    /// Empirical `Pr[loss > ε]`.
    pub exceed_rate: f64,
    /// `δ + 3·√(δ(1−δ)/n)`.
    pub threshold: f64,
    pub passed: bool,
    pub loss_mean: f64,
    pub loss_variance: f64,
}

/// Monte Carlo check of the scalar Gaussian mechanism on adjacent inputs `0`
/// and `Δ`: draws `X ~ N(0, σ²)` and the log-likelihood ratio
/// `ln p₀(X)/p_Δ(X) = (Δ² − 2ΔX)/(2σ²)`.
pub fn privacy_loss_audit<R: Rng + ?Sized>(
    sigma: f64,
    distance: f64,
    epsilon: f64,
    delta: f64,
    samples: usize,
    rng: &mut R,
) -> Result<AuditReport, PrivacyError> {
    require(sigma > 0.0 && distance > 0.0, || {
        format!("sigma and distance must be positive, got {sigma}, {distance}")
    })?;
    require(samples >= 2, || "need at least two samples".into())?;
    require(delta >= 0.0 && delta < 1.0, || format!("delta must lie in [0, 1), got {delta}"))?;
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let denom = 2.0 * sigma * sigma;
    let d2 = distance * distance;
    let mut exceed = 0usize;
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..samples {
        let x: f64 = normal.sample(rng);
        let loss = (d2 - 2.0 * distance * x) / denom;
        if loss > epsilon {
            exceed += 1;
        }
        let d = loss - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (loss - mean);
    }
    let n = samples as f64;
    let exceed_rate = exceed as f64 / n;
    let threshold = delta + 3.0 * (delta * (1.0 - delta) / n).sqrt();
    Ok(AuditReport {
        samples,
        exceed_rate,
        threshold,
        passed: exceed_rate <= threshold,
        loss_mean: mean,
        loss_variance: m2 / (n - 1.0),
    })
}
