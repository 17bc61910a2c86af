use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{epsilon_for_sigma, require, PrivacyError};

/// `ε_total = ε√(2K ln(1/δ′)) + Kε(e^ε − 1)`, `δ_total = Kδ + δ′`.
pub fn account_strong_composition(
    k: u64,
    epsilon: f64,
    delta: f64,
    delta_prime: f64,
) -> Result<(f64, f64), PrivacyError> {
    require(k >= 1, || "K must be at least 1".into())?;
    require(epsilon > 0.0, || format!("epsilon must be positive, got {epsilon}"))?;
    require(delta > 0.0 && delta < 1.0 && delta_prime > 0.0 && delta_prime < 1.0, || {
        format!("delta and delta' must lie in (0, 1), got {delta}, {delta_prime}")
    })?;
    let k = k as f64;
    let eps = epsilon * (2.0 * k * (1.0 / delta_prime).ln()).sqrt() + k * epsilon * epsilon.exp_m1();
    Ok((eps, k * delta + delta_prime))
}

/// Rényi orders searched by [`account_rdp`]: 1.25, 1.5, …, 512.
pub static RDP_ALPHAS: std::sync::LazyLock<Vec<f64>> =
    std::sync::LazyLock::new(|| (5..=2048).map(|i| f64::from(i) * 0.25).collect());

fn check_gaussian(k: u64, sigma_rel: f64, delta: f64) -> Result<(), PrivacyError> {
    require(k >= 1, || "K must be at least 1".into())?;
    require(sigma_rel > 0.0, || format!("sigma_rel must be positive, got {sigma_rel}"))?;
    require(delta > 0.0 && delta < 1.0, || format!("delta must lie in (0, 1), got {delta}"))
}

fn rdp_from_ledger(rdp: impl Iterator<Item = (f64, f64)>, delta: f64) -> (f64, f64) {
    let log_inv = (1.0 / delta).ln();
    rdp.map(|(a, e)| (e + log_inv / (a - 1.0), a))
        .fold((f64::INFINITY, 0.0), |best, c| if c.0 < best.0 { c } else { best })
}

/// `min_α [Kα/(2σ_rel²) + ln(1/δ)/(α − 1)]` over [`RDP_ALPHAS`]; returns `(ε, α*)`.
pub fn account_rdp(k: u64, sigma_rel: f64, delta: f64) -> Result<(f64, f64), PrivacyError> {
    check_gaussian(k, sigma_rel, delta)?;
    let k = k as f64;
    let per = 1.0 / (2.0 * sigma_rel * sigma_rel);
    Ok(rdp_from_ledger(RDP_ALPHAS.iter().map(|&a| (a, k * a * per)), delta))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Tradeoff curve of `μ`-GDP: `δ(ε) = Φ(−ε/μ + μ/2) − e^ε Φ(−ε/μ − μ/2)`.
pub fn gdp_delta(mu: f64, epsilon: f64) -> f64 {
    let a = normal_cdf(-epsilon / mu + mu / 2.0);
    let b = normal_cdf(-epsilon / mu - mu / 2.0);
    // e^ε·Φ(·) overflows long before the product does.
    let tail = if b > 0.0 { (epsilon + b.ln()).exp() } else { 0.0 };
    (a - tail).max(0.0)
}

fn gdp_epsilon(mu: f64, delta: f64) -> f64 {
    if delta >= gdp_delta(mu, 0.0) {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 100.0f64);
    if gdp_delta(mu, hi) > delta {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gdp_delta(mu, mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    hi
}

/// `μ = √K/σ_rel`, then the `ε` at which the GDP curve reaches `δ`
/// (bisection on `[0, 100]`; `0` when `δ ≥ δ(0)`).
pub fn account_gdp(k: u64, sigma_rel: f64, delta: f64) -> Result<f64, PrivacyError> {
    check_gaussian(k, sigma_rel, delta)?;
    Ok(gdp_epsilon((k as f64).sqrt() / sigma_rel, delta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountMethod {
    StrongComposition,
    Rdp,
    Gdp,
}

/// Running privacy ledger for repeated Gaussian mechanisms of fixed `σ_rel`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub method: AccountMethod,
    pub sigma_rel: f64,
    pub delta: f64,
    /// Composition slack for strong composition.
    pub delta_prime: f64,
    pub steps: u64,
    /// Accumulated `ε(α)` on [`RDP_ALPHAS`] (RDP only).
    pub rdp: Vec<f64>,
    /// Accumulated `μ²` (GDP only).
    pub mu_squared: f64,
}

impl AccountantState {
    pub fn new(method: AccountMethod, sigma_rel: f64, delta: f64, delta_prime: f64) -> Result<Self, PrivacyError> {
        check_gaussian(1, sigma_rel, delta)?;
        if method == AccountMethod::StrongComposition {
            require(delta_prime > 0.0 && delta_prime < 1.0, || {
                format!("delta' must lie in (0, 1), got {delta_prime}")
            })?;
        }
        let rdp = if method == AccountMethod::Rdp {
            vec![0.0; RDP_ALPHAS.len()]
        } else {
            Vec::new()
        };
        Ok(Self {
            method,
            sigma_rel,
            delta,
            delta_prime,
            steps: 0,
            rdp,
            mu_squared: 0.0,
        })
    }

    /// Records `n` more mechanism invocations.
    pub fn step(&mut self, n: u64) {
        self.steps += n;
        let per = 1.0 / (self.sigma_rel * self.sigma_rel);
        match self.method {
            AccountMethod::Rdp => {
                for (e, a) in self.rdp.iter_mut().zip(RDP_ALPHAS.iter()) {
                    *e += n as f64 * a * per / 2.0;
                }
            }
            AccountMethod::Gdp => self.mu_squared += n as f64 * per,
            AccountMethod::StrongComposition => {}
        }
    }

    /// `(ε, δ_total)` spent so far. Zero steps cost nothing.
    pub fn spent(&self) -> (f64, f64) {
        if self.steps == 0 {
            return (0.0, 0.0);
        }
        match self.method {
            AccountMethod::StrongComposition => {
                let eps = epsilon_for_sigma(self.sigma_rel, self.delta).expect("validated at construction");
                account_strong_composition(self.steps, eps, self.delta, self.delta_prime)
                    .expect("validated at construction")
            }
            AccountMethod::Rdp => {
                let (eps, _) = rdp_from_ledger(RDP_ALPHAS.iter().copied().zip(self.rdp.iter().copied()), self.delta);
                (eps, self.delta)
            }
            AccountMethod::Gdp => (gdp_epsilon(self.mu_squared.sqrt(), self.delta), self.delta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strong_composition_worked_value() {
        let (e, d) = account_strong_composition(1, 0.1, 1e-6, 1e-6).unwrap();
        assert!((e - 0.536170).abs() < 1e-6, "{e}");
        assert!((d - 2e-6).abs() < 1e-20);
    }

    #[test]
    fn rdp_worked_value() {
        let (e, a) = account_rdp(1, 1.0, 1e-5).unwrap();
        assert!((e - 5.2985).abs() / 5.2985 < 1e-3, "{e}");
        assert!((a - 5.75).abs() <= 0.25, "{a}");
        assert_eq!(RDP_ALPHAS.len(), 2044);
        assert_eq!(*RDP_ALPHAS.last().unwrap(), 512.0);
    }

    #[test]
    fn gdp_curve_and_inverse() {
        assert!((gdp_delta(1.0, 0.0) - 0.382925).abs() < 1e-6);
        let e = account_gdp(1, 1.0, 1e-5).unwrap();
        assert!((gdp_delta(1.0, e) - 1e-5).abs() < 1e-12);
        assert_eq!(account_gdp(1, 1.0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn state_matches_closed_forms() {
        for method in [AccountMethod::StrongComposition, AccountMethod::Rdp, AccountMethod::Gdp] {
            let mut s = AccountantState::new(method, 3.0, 1e-5, 1e-6).unwrap();
            assert_eq!(s.spent().0, 0.0);
            let mut last = 0.0;
            for _ in 0..10 {
                s.step(5);
                let e = s.spent().0;
                assert!(e >= last);
                last = e;
            }
            let expected = match method {
                AccountMethod::StrongComposition => {
                    let eps = epsilon_for_sigma(3.0, 1e-5).unwrap();
                    account_strong_composition(50, eps, 1e-5, 1e-6).unwrap().0
                }
                AccountMethod::Rdp => account_rdp(50, 3.0, 1e-5).unwrap().0,
                AccountMethod::Gdp => account_gdp(50, 3.0, 1e-5).unwrap(),
            };
            assert!((last - expected).abs() <= 1e-9 * expected, "{method:?}: {last} vs {expected}");
        }
    }
}
