use serde::{Deserialize, Serialize};

use super::{check_len, AttackError, AttackScores, ConfidenceRecord};

const PROB_FLOOR: f64 = 1e-12;
const VAR_FLOOR: f64 = 1e-6;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// `φ(p) = ln(p/(1−p))` with `p` clamped away from 0 and 1.
pub fn logit_confidence(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

/// Threshold attack on the loss: `score = τ − loss`.
pub fn yeom_score(losses: &[f64], is_member: &[bool], tau: f64) -> Result<AttackScores, AttackError> {
    check_len("membership labels", is_member.len(), losses.len())?;
    let mut out = AttackScores::default();
    for (i, (&l, &m)) in losses.iter().zip(is_member).enumerate() {
        if !l.is_finite() {
            return Err(AttackError::Input(format!("loss of sample {i} is not finite")));
        }
        out.push(i, tau - l, m);
    }
    Ok(out)
}

/// `Mentr(p, y) = −(1−p_y) ln p_y − Σ_{i≠y} p_i ln(1−p_i)`.
pub fn modified_entropy(probs: &[f64], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let p = clamp_prob(p);
            if i == label {
                -(1.0 - p) * p.ln()
            } else {
                -p * (1.0 - p).ln()
            }
        })
        .sum()
}

/// Threshold maximizing balanced accuracy of "member iff value < threshold".
/// Candidates are midpoints between consecutive distinct values plus one
/// point beyond each end. Ties keep the smallest threshold.
fn best_threshold(vals: &[(f64, bool)]) -> Option<f64> {
    let pos = vals.iter().filter(|v| v.1).count();
    let neg = vals.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut sorted = vals.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Balanced accuracy times 2·pos·neg, kept integral so ties compare exactly.
    let key = |tp: usize, fp: usize| tp * neg + (neg - fp) * pos;
    let (mut best, mut best_key) = (sorted[0].0 - 1.0, key(0, 0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let thr = if i < sorted.len() { 0.5 * (v + sorted[i].0) } else { v + 1.0 };
        if key(tp, fp) > best_key {
            best_key = key(tp, fp);
            best = thr;
        }
    }
    Some(best)
}

/// Per-class modified-entropy thresholds fitted on shadow records. Classes
/// without both members and non-members use the pooled threshold.
pub fn song_mittal_thresholds(shadow: &[ConfidenceRecord], classes: usize) -> Result<Vec<f64>, AttackError> {
    let vals: Vec<(usize, f64, bool)> = shadow
        .iter()
        .map(|r| (r.label, modified_entropy(&r.probs, r.label), r.is_member))
        .collect();
    let all: Vec<(f64, bool)> = vals.iter().map(|v| (v.1, v.2)).collect();
    let global = best_threshold(&all).ok_or(AttackError::SingleClass)?;
    Ok((0..classes)
        .map(|c| {
            let own: Vec<(f64, bool)> = vals.iter().filter(|v| v.0 == c).map(|v| (v.1, v.2)).collect();
            best_threshold(&own).unwrap_or(global)
        })
        .collect())
}

/// `score = threshold_y − Mentr(p, y)`.
pub fn song_mittal_score(target: &[ConfidenceRecord], thresholds: &[f64]) -> Result<AttackScores, AttackError> {
    let mut out = AttackScores::default();
    for (i, r) in target.iter().enumerate() {
        let thr = *thresholds
            .get(r.label)
            .ok_or_else(|| AttackError::Input(format!("sample {i}: no threshold for class {}", r.label)))?;
        out.push(i, thr - modified_entropy(&r.probs, r.label), r.is_member);
    }
    Ok(out)
}

/// Difficulty calibration: `φ(p_target) − mean φ(p_out)` over OUT shadows.
pub fn watson_score(target_conf: &[f64], out_confs: &[Vec<f64>], is_member: &[bool]) -> Result<AttackScores, AttackError> {
    check_len("OUT shadow lists", out_confs.len(), target_conf.len())?;
    check_len("membership labels", is_member.len(), target_conf.len())?;
    let mut out = AttackScores::default();
    for i in 0..target_conf.len() {
        if out_confs[i].is_empty() {
            out.skipped.push(i);
            continue;
        }
        let base = out_confs[i].iter().map(|&p| logit_confidence(p)).sum::<f64>() / out_confs[i].len() as f64;
        out.push(i, logit_confidence(target_conf[i]) - base, is_member[i]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiraVariance {
    /// Each sample's own IN and OUT variances.
    PerSample,
    /// IN and OUT variances averaged over all scored samples.
    Global,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
}

/// Likelihood ratio of the target's logit confidence under Gaussians fitted to
/// IN and OUT shadow observations: `log N(x; μ_in, σ²_in) − log N(x; μ_out, σ²_out)`.
/// Inputs are logit confidences. Variances use the `n−1` estimator, floored at 1e-6.
pub fn lira_score(
    target: &[f64],
    in_obs: &[Vec<f64>],
    out_obs: &[Vec<f64>],
    is_member: &[bool],
    variance: LiraVariance,
) -> Result<AttackScores, AttackError> {
    let n = target.len();
    check_len("IN observations", in_obs.len(), n)?;
    check_len("OUT observations", out_obs.len(), n)?;
    check_len("membership labels", is_member.len(), n)?;
    let mut out = AttackScores::default();
    let mut fits = Vec::new();
    for i in 0..n {
        if in_obs[i].len() < 2 || out_obs[i].len() < 2 {
            out.skipped.push(i);
            continue;
        }
        fits.push((i, mean_var(&in_obs[i]), mean_var(&out_obs[i])));
    }
    let (gin, gout) = if fits.is_empty() {
        (0.0, 0.0)
    } else {
        let k = fits.len() as f64;
        (
            fits.iter().map(|f| f.1 .1).sum::<f64>() / k,
            fits.iter().map(|f| f.2 .1).sum::<f64>() / k,
        )
    };
    for (i, (mi, vi), (mo, vo)) in fits {
        let (vi, vo) = match variance {
            LiraVariance::PerSample => (vi, vo),
            LiraVariance::Global => (gin, gout),
        };
        let s = log_normal_pdf(target[i], mi, vi.max(VAR_FLOOR)) - log_normal_pdf(target[i], mo, vo.max(VAR_FLOOR));
        out.push(i, s, is_member[i]);
    }
    Ok(out)
}

fn ratio(target: f64, refs: &[f64]) -> f64 {
    let mean = refs.iter().sum::<f64>() / refs.len() as f64;
    target / mean.max(PROB_FLOOR)
}

/// Relative likelihood test. `ratio(x) = p_target(x) / mean_ref p_ref(x)`
/// (probabilities of the true label); the score of `x` is the fraction of
/// population points `z` with `ratio(x)/ratio(z) ≥ γ`.
pub fn rmia_score(
    target: &[f64],
    refs: &[Vec<f64>],
    population_target: &[f64],
    population_refs: &[Vec<f64>],
    gamma: f64,
    is_member: &[bool],
) -> Result<AttackScores, AttackError> {
    check_len("reference outputs", refs.len(), target.len())?;
    check_len("membership labels", is_member.len(), target.len())?;
    check_len("population reference outputs", population_refs.len(), population_target.len())?;
    if population_target.is_empty() {
        return Err(AttackError::Input("population set is empty".into()));
    }
    if !(gamma > 0.0) {
        return Err(AttackError::Input(format!("gamma must be positive, got {gamma}")));
    }
    let mut pop = Vec::with_capacity(population_target.len());
    for (j, (&p, r)) in population_target.iter().zip(population_refs).enumerate() {
        if r.is_empty() {
            return Err(AttackError::Input(format!("population point {j} has no reference outputs")));
        }
        pop.push(ratio(p, r));
    }
    let mut out = AttackScores::default();
    for i in 0..target.len() {
        if refs[i].is_empty() {
            out.skipped.push(i);
            continue;
        }
        let rx = ratio(target[i], &refs[i]);
        let wins = pop.iter().filter(|&&rz| rx >= gamma * rz).count();
        out.push(i, wins as f64 / pop.len() as f64, is_member[i]);
    }
    Ok(out)
}
