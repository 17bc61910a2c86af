use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::seed::{self, stream};

/// Which samples each of `n_models` shadow models trains on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowSplitPlan {
    pub n_models: usize,
    /// `membership[sample][model]`.
    pub membership: Vec<Vec<bool>>,
    pub seed: u64,
}

impl ShadowSplitPlan {
    pub fn n_samples(&self) -> usize {
        self.membership.len()
    }

    pub fn is_in(&self, sample: usize, model: usize) -> bool {
        self.membership[sample][model]
    }

    /// Sample indices model `m` trains on, ascending.
    pub fn members_of(&self, m: usize) -> Vec<usize> {
        (0..self.n_samples()).filter(|&i| self.membership[i][m]).collect()
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        for (i, row) in self.membership.iter().enumerate() {
            if row.len() != self.n_models {
                return Err(AttackError::Plan(format!("row {i} has {} entries", row.len())));
            }
            let c = row.iter().filter(|&&b| b).count();
            if 2 * c != self.n_models {
                return Err(AttackError::Plan(format!("sample {i} is in {c} of {} models", self.n_models)));
            }
        }
        Ok(())
    }
}

/// Balanced random plan: every sample is IN exactly `n_models/2` models.
/// Samples are visited in random order and each joins the half of the models
/// with the fewest members so far (ties broken at random), so every model
/// also trains on `⌊n/2⌋` or `⌈n/2⌉` samples.
pub fn make_shadow_plan(n_samples: usize, n_models: usize, seed: u64) -> Result<ShadowSplitPlan, AttackError> {
    if n_models == 0 || n_models % 2 != 0 {
        return Err(AttackError::Plan(format!("model count must be even and positive, got {n_models}")));
    }
    let mut rng = seed::rng(seed::derive_seed(seed, stream::PLAN, 0));
    let mut visit: Vec<usize> = (0..n_samples).collect();
    visit.shuffle(&mut rng);
    let mut load = vec![0usize; n_models];
    let mut order: Vec<usize> = (0..n_models).collect();
    let mut membership = vec![vec![false; n_models]; n_samples];
    for i in visit {
        order.shuffle(&mut rng);
        order.sort_by_key(|&m| load[m]);
        for &m in &order[..n_models / 2] {
            membership[i][m] = true;
            load[m] += 1;
        }
    }
    Ok(ShadowSplitPlan {
        n_models,
        membership,
        seed,
    })
}
