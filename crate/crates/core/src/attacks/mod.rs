//! Membership-inference attacks, the shadow split protocol and ROC metrics.
//!
//! Every score is oriented so that higher means "more likely a member".

mod ensemble;
mod plan;
mod roc;
mod scores;
mod shokri;

pub use ensemble::{attack_fold, cross_validate, run_attack, summarize_folds, AttackKind, AttackResult, CvReport, EnsembleOutputs, ModelOutputs};
pub use plan::{make_shadow_plan, ShadowSplitPlan};
pub use roc::{roc_metrics, RocCurve, RocReport};
pub use scores::{
    clamp_prob, lira_score, logit_confidence, modified_entropy, rmia_score, song_mittal_score,
    song_mittal_thresholds, watson_score, yeom_score, LiraVariance,
};
pub use shokri::shokri_attack;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("shadow plan: {0}")]
    Plan(String),
    #[error("scores need at least one member and one non-member")]
    SingleClass,
    #[error("missing outputs for models {0:?}")]
    MissingModels(Vec<usize>),
}

/// Per-sample membership scores. `ids[i]` indexes the queried sample set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackScores {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub is_member: Vec<bool>,
    /// Queried samples that could not be scored.
    pub skipped: Vec<usize>,
    /// Notes about fallbacks taken while scoring.
    pub flags: Vec<String>,
}

impl AttackScores {
    fn push(&mut self, id: usize, score: f64, member: bool) {
        self.ids.push(id);
        self.scores.push(score);
        self.is_member.push(member);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.scores.len() != self.is_member.len() || self.ids.len() != self.scores.len() {
            return Err(AttackError::Input("ids, scores and labels differ in length".into()));
        }
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(AttackError::Input(format!("score of sample {} is not finite", self.ids[i])));
        }
        let members = self.is_member.iter().filter(|&&m| m).count();
        if members == 0 || members == self.is_member.len() {
            return Err(AttackError::SingleClass);
        }
        Ok(())
    }
}

/// A model's prediction on one sample, with the sample's label and membership.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub probs: Vec<f64>,
    pub label: usize,
    pub is_member: bool,
}

fn check_len(what: &str, n: usize, expected: usize) -> Result<(), AttackError> {
    if n == expected {
        Ok(())
    } else {
        Err(AttackError::Input(format!("{what}: expected {expected} entries, got {n}")))
    }
}
