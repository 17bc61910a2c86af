use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    clamp_prob, lira_score, logit_confidence, roc_metrics, RocReport, rmia_score, shokri_attack, song_mittal_score,
    song_mittal_thresholds, watson_score, yeom_score, AttackError, AttackScores, ConfidenceRecord, LiraVariance,
    ShadowSplitPlan,
};

/// Class probabilities a trained model assigns to the pool and population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputs {
    pub pool: Vec<Vec<f64>>,
    /// Held-out samples no model trained on.
    pub population: Vec<Vec<f64>>,
}

/// Everything the black-box attacks see: outputs of each model of a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutputs {
    pub plan: ShadowSplitPlan,
    pub labels: Vec<usize>,
    pub population_labels: Vec<usize>,
    pub models: Vec<Option<ModelOutputs>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Yeom,
    Shokri,
    SongMittal,
    Watson,
    Lira,
    /// LiRA with variances pooled over samples.
    LiraGlobal,
    Rmia,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::Yeom,
        AttackKind::Shokri,
        AttackKind::SongMittal,
        AttackKind::Watson,
        AttackKind::Lira,
        AttackKind::LiraGlobal,
        AttackKind::Rmia,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Yeom => "yeom",
            AttackKind::Shokri => "shokri",
            AttackKind::SongMittal => "song_mittal",
            AttackKind::Watson => "watson",
            AttackKind::Lira => "lira",
            AttackKind::LiraGlobal => "lira_global",
            AttackKind::Rmia => "rmia",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl EnsembleOutputs {
    pub fn validate(&self) -> Result<(), AttackError> {
        self.plan.validate()?;
        if self.models.len() != self.plan.n_models {
            return Err(AttackError::Plan(format!(
                "plan has {} models but {} output sets were given",
                self.plan.n_models,
                self.models.len()
            )));
        }
        if self.labels.len() != self.plan.n_samples() {
            return Err(AttackError::Input("label count differs from plan size".into()));
        }
        let missing: Vec<usize> = (0..self.models.len()).filter(|&m| self.models[m].is_none()).collect();
        if !missing.is_empty() {
            return Err(AttackError::MissingModels(missing));
        }
        for (m, o) in self.models.iter().flatten().enumerate() {
            if o.pool.len() != self.labels.len() || o.population.len() != self.population_labels.len() {
                return Err(AttackError::Input(format!("model {m}: output count differs from data")));
            }
        }
        Ok(())
    }

    fn outputs(&self, m: usize) -> &ModelOutputs {
        self.models[m].as_ref().expect("validated")
    }

    fn true_prob(&self, m: usize, i: usize) -> f64 {
        self.outputs(m).pool[i][self.labels[i]]
    }

    fn records(&self, m: usize) -> Vec<ConfidenceRecord> {
        (0..self.labels.len())
            .map(|i| ConfidenceRecord {
                probs: self.outputs(m).pool[i].clone(),
                label: self.labels[i],
                is_member: self.plan.is_in(i, m),
            })
            .collect()
    }
}

/// Scores every pool sample against model `target`, using the other models as shadows.
pub fn run_attack(kind: AttackKind, ens: &EnsembleOutputs, target: usize) -> Result<AttackScores, AttackError> {
    ens.validate()?;
    if target >= ens.plan.n_models {
        return Err(AttackError::Input(format!("target {target} is not in the plan")));
    }
    let n = ens.labels.len();
    let shadows: Vec<usize> = (0..ens.plan.n_models).filter(|&m| m != target).collect();
    let member: Vec<bool> = (0..n).map(|i| ens.plan.is_in(i, target)).collect();
    let target_p: Vec<f64> = (0..n).map(|i| ens.true_prob(target, i)).collect();
    let observed = |i: usize, inside: bool| -> Vec<f64> {
        shadows
            .iter()
            .filter(|&&m| ens.plan.is_in(i, m) == inside)
            .map(|&m| ens.true_prob(m, i))
            .collect()
    };
    match kind {
        AttackKind::Yeom => {
            let losses: Vec<f64> = target_p.iter().map(|&p| -clamp_prob(p).ln()).collect();
            let in_losses: Vec<f64> = (0..n).filter(|&i| member[i]).map(|i| losses[i]).collect();
            if in_losses.is_empty() {
                return Err(AttackError::SingleClass);
            }
            let tau = in_losses.iter().sum::<f64>() / in_losses.len() as f64;
            yeom_score(&losses, &member, tau)
        }
        AttackKind::Shokri => {
            let shadow: Vec<ConfidenceRecord> = shadows.iter().flat_map(|&m| ens.records(m)).collect();
            shokri_attack(&shadow, &ens.records(target))
        }
        AttackKind::SongMittal => {
            let shadow: Vec<ConfidenceRecord> = shadows.iter().flat_map(|&m| ens.records(m)).collect();
            let classes = ens.outputs(target).pool.first().map_or(0, Vec::len);
            let thr = song_mittal_thresholds(&shadow, classes)?;
            song_mittal_score(&ens.records(target), &thr)
        }
        AttackKind::Watson => {
            let outs: Vec<Vec<f64>> = (0..n).map(|i| observed(i, false)).collect();
            watson_score(&target_p, &outs, &member)
        }
        AttackKind::Lira | AttackKind::LiraGlobal => {
            let phi = |v: Vec<f64>| v.into_iter().map(logit_confidence).collect::<Vec<f64>>();
            let ins: Vec<Vec<f64>> = (0..n).map(|i| phi(observed(i, true))).collect();
            let outs: Vec<Vec<f64>> = (0..n).map(|i| phi(observed(i, false))).collect();
            let x: Vec<f64> = target_p.iter().map(|&p| logit_confidence(p)).collect();
            let var = if kind == AttackKind::Lira {
                LiraVariance::PerSample
            } else {
                LiraVariance::Global
            };
            lira_score(&x, &ins, &outs, &member, var)
        }
        AttackKind::Rmia => {
            let refs: Vec<Vec<f64>> = (0..n)
                .map(|i| shadows.iter().map(|&m| ens.true_prob(m, i)).collect())
                .collect();
            let pop_p = |m: usize, j: usize| ens.outputs(m).population[j][ens.population_labels[j]];
            let np = ens.population_labels.len();
            let pop_target: Vec<f64> = (0..np).map(|j| pop_p(target, j)).collect();
            let pop_refs: Vec<Vec<f64>> = (0..np).map(|j| shadows.iter().map(|&m| pop_p(m, j)).collect()).collect();
            rmia_score(&target_p, &refs, &pop_target, &pop_refs, 1.0, &member)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    pub fold: usize,
    pub auc: f64,
    /// Keyed by the FPR target as written, e.g. `"0.01"`.
    pub tpr_at: BTreeMap<String, f64>,
    pub accuracy: f64,
    pub n_scored: usize,
    pub n_skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub attack: String,
    pub folds: Vec<AttackResult>,
    pub mean_auc: f64,
    pub sd_auc: f64,
    pub mean_tpr_at: BTreeMap<String, f64>,
    pub sd_tpr_at: BTreeMap<String, f64>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Single fold: attack `target` and summarize its ROC.
pub fn attack_fold(
    kind: AttackKind,
    ens: &EnsembleOutputs,
    target: usize,
    fpr_targets: &[f64],
) -> Result<(AttackResult, RocReport), AttackError> {
    let scores = run_attack(kind, ens, target)?;
    let roc = roc_metrics(&scores, fpr_targets)?;
    let result = AttackResult {
        attack: kind.name().to_string(),
        fold: target,
        auc: roc.auc,
        tpr_at: roc.tpr_at.iter().map(|(f, t)| (f.to_string(), *t)).collect(),
        accuracy: roc.accuracy,
        n_scored: scores.len(),
        n_skipped: scores.skipped.len(),
    };
    Ok((result, roc))
}

/// Averages per-fold results (sample standard deviations).
pub fn summarize_folds(kind: AttackKind, folds: Vec<AttackResult>) -> CvReport {
    let (mean_auc, sd_auc) = mean_sd(&folds.iter().map(|f| f.auc).collect::<Vec<_>>());
    let (mean_accuracy, sd_accuracy) = mean_sd(&folds.iter().map(|f| f.accuracy).collect::<Vec<_>>());
    let mut mean_tpr_at = BTreeMap::new();
    let mut sd_tpr_at = BTreeMap::new();
    if let Some(first) = folds.first() {
        for key in first.tpr_at.keys() {
            let (m, s) = mean_sd(&folds.iter().map(|f| f.tpr_at[key]).collect::<Vec<_>>());
            mean_tpr_at.insert(key.clone(), m);
            sd_tpr_at.insert(key.clone(), s);
        }
    }
    CvReport {
        attack: kind.name().to_string(),
        folds,
        mean_auc,
        sd_auc,
        mean_tpr_at,
        sd_tpr_at,
        mean_accuracy,
        sd_accuracy,
    }
}

/// Every model plays the target once; metrics are averaged over folds.
pub fn cross_validate(kind: AttackKind, ens: &EnsembleOutputs, fpr_targets: &[f64]) -> Result<CvReport, AttackError> {
    ens.validate()?;
    let folds = (0..ens.plan.n_models)
        .into_par_iter()
        .map(|t| attack_fold(kind, ens, t, fpr_targets).map(|(r, _)| r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize_folds(kind, folds))
}
