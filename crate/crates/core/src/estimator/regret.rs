//! Cumulative regret of a subset-selection policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::device::ClientId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegretMode {
    /// True rewards on both the optimal and the chosen set.
    #[default]
    Pseudo,
    /// True rewards on the optimal set, predicted rewards on the chosen one.
    Literal,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretTracker {
    pub mode: RegretMode,
    pub per_round: Vec<f64>,
    pub cumulative: f64,
}

impl RegretTracker {
    pub fn new(mode: RegretMode) -> Self {
        Self {
            mode,
            ..Default::default()
        }
    }

    pub fn rounds(&self) -> usize {
        self.per_round.len()
    }

    /// Cumulative regret after each round.
    pub fn curve(&self) -> Vec<f64> {
        self.per_round
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect()
    }

    /// Adds one round. The comparison set has as many members as were
    /// chosen (at most `k`), so a round that picks fewer clients is not
    /// credited for the missing ones. `predicted` is only read in literal
    /// mode; chosen ids missing from it fall back to the true reward.
    pub fn record(
        &mut self,
        true_rewards: &BTreeMap<ClientId, f64>,
        predicted: &BTreeMap<ClientId, f64>,
        chosen: &[ClientId],
        k: usize,
    ) -> f64 {
        let size = chosen.len().min(k);
        let mut best: Vec<f64> = true_rewards.values().copied().collect();
        best.sort_by(|a, b| b.total_cmp(a));
        let optimal: f64 = best.iter().take(size).sum();
        let got: f64 = chosen
            .iter()
            .take(size)
            .map(|id| {
                let truth = true_rewards.get(id).copied().unwrap_or(f64::NEG_INFINITY);
                match self.mode {
                    RegretMode::Pseudo => truth,
                    RegretMode::Literal => predicted.get(id).copied().unwrap_or(truth),
                }
            })
            .sum();
        let r = optimal - got;
        self.per_round.push(r);
        self.cumulative += r;
        r
    }
}
