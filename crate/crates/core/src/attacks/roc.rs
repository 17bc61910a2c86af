use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{AttackError, AttackScores};

/// Step ROC curve from `(0, 0)` to `(1, 1)`, one point per distinct score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl RocCurve {
    /// `fpr,tpr` rows with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in self.fpr.iter().zip(&self.tpr) {
            writeln!(s, "{f:.16e},{t:.16e}").expect("writing to a String");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub curve: RocCurve,
    pub auc: f64,
    /// `(target FPR, largest TPR reachable at FPR ≤ target)`.
    pub tpr_at: Vec<(f64, f64)>,
    /// Best balanced accuracy over thresholds.
    pub accuracy: f64,
}

impl RocReport {
    pub fn tpr_at_fpr(&self, target: f64) -> Option<f64> {
        self.tpr_at.iter().find(|(f, _)| *f == target).map(|&(_, t)| t)
    }
}

/// Threshold sweep ("member iff score ≥ threshold") over the distinct scores.
pub fn roc_metrics(scores: &AttackScores, fpr_targets: &[f64]) -> Result<RocReport, AttackError> {
    scores.validate()?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]));
    let pos = scores.is_member.iter().filter(|&&m| m).count() as f64;
    let neg = scores.len() as f64 - pos;
    let (mut fpr, mut tpr) = (vec![0.0], vec![0.0]);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores.scores[order[i]];
        while i < order.len() && scores.scores[order[i]] == s {
            if scores.is_member[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        fpr.push(fp as f64 / neg);
        tpr.push(tp as f64 / pos);
    }
    let auc = fpr
        .windows(2)
        .zip(tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0)
        .sum();
    let tpr_at = fpr_targets
        .iter()
        .map(|&target| {
            let best = fpr
                .iter()
                .zip(&tpr)
                .filter(|(f, _)| **f <= target)
                .map(|(_, &t)| t)
                .fold(0.0, f64::max);
            (target, best)
        })
        .collect();
    let accuracy = fpr
        .iter()
        .zip(&tpr)
        .map(|(f, t)| (t + 1.0 - f) / 2.0)
        .fold(0.0, f64::max);
    Ok(RocReport {
        curve: RocCurve { fpr, tpr },
        auc,
        tpr_at,
        accuracy,
    })
}
