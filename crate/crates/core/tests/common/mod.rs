//! Independent reimplementations the library is checked against.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use nsde_lab::attacks::AttackScores;

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Standard normal CDF by composite Simpson integration of the density over
/// the lower tail, so small values keep their relative accuracy.
pub fn simpson_cdf(x: f64) -> f64 {
    if x > 0.0 {
        return 1.0 - simpson_cdf(-x);
    }
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (lo, hi) = (x - 14.0, x);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let mut s = pdf(lo) + pdf(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(lo + i as f64 * h);
    }
    s * h / 3.0
}

pub fn oracle_gdp_delta(mu: f64, eps: f64) -> f64 {
    simpson_cdf(-eps / mu + mu / 2.0) - eps.exp() * simpson_cdf(-eps / mu - mu / 2.0)
}

/// Minimum of the RDP conversion over a dense order grid.
pub fn dense_rdp(k: f64, sigma_rel: f64, delta: f64) -> f64 {
    (1..=1_000_000)
        .map(|i| 1.0 + i as f64 * 1e-3)
        .map(|a| k * a / (2.0 * sigma_rel * sigma_rel) + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
}

pub const TOL: f64 = 1e-10;

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + b.abs())
}

pub fn clamp(p: f64) -> f64 {
    p.max(1e-12).min(1.0 - 1e-12)
}

pub fn logit(p: f64) -> f64 {
    let p = clamp(p);
    p.ln() - (1.0 - p).ln()
}

pub fn members(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    m.shuffle(rng);
    m
}

pub fn probs(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Mann–Whitney AUC over all member/non-member pairs, ties counting one half.
pub fn pairwise_auc(s: &AttackScores) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if s.is_member[i] && !s.is_member[j] {
                den += 1.0;
                num += if s.scores[i] > s.scores[j] {
                    1.0
                } else if s.scores[i] == s.scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Best TPR over every threshold whose FPR stays within `target`.
pub fn brute_tpr_at(s: &AttackScores, target: f64) -> f64 {
    let pos = s.is_member.iter().filter(|&&m| m).count() as f64;
    let neg = s.len() as f64 - pos;
    let mut best = 0.0f64;
    let mut thresholds = s.scores.clone();
    thresholds.push(f64::INFINITY);
    for &t in &thresholds {
        let tp = (0..s.len()).filter(|&i| s.is_member[i] && s.scores[i] >= t).count() as f64;
        let fp = (0..s.len()).filter(|&i| !s.is_member[i] && s.scores[i] >= t).count() as f64;
        if fp / neg <= target {
            best = best.max(tp / pos);
        }
    }
    best
}

pub fn brute_mentr(p: &[f64], y: usize) -> f64 {
    let mut total = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        let q = clamp(pi);
        total += if i == y { -(1.0 - q) * q.ln() } else { -q * (1.0 - q).ln() };
    }
    total
}

/// Smallest candidate threshold with the highest balanced accuracy of
/// "member iff value < threshold".
pub fn brute_threshold(vals: &[(f64, bool)]) -> Option<f64> {
    let pos = vals.iter().filter(|v| v.1).count();
    let neg = vals.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut distinct: Vec<f64> = vals.iter().map(|v| v.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut cands = vec![distinct[0] - 1.0];
    cands.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.push(distinct[distinct.len() - 1] + 1.0);
    let mut best = (cands[0], 0u64);
    for &c in &cands {
        let tp = vals.iter().filter(|v| v.1 && v.0 < c).count() as u64;
        let tn = vals.iter().filter(|v| !v.1 && v.0 >= c).count() as u64;
        let key = tp * neg as u64 + tn * pos as u64;
        if key > best.1 {
            best = (c, key);
        }
    }
    Some(best.0)
}

pub fn gauss_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -(x - mean) * (x - mean) / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * var.ln()
}

pub fn unbiased(xs: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    for x in xs {
        mean += x;
    }
    mean /= xs.len() as f64;
    let mut ss = 0.0;
    for x in xs {
        ss += (x - mean) * (x - mean);
    }
    (mean, ss / (xs.len() - 1) as f64)
}

