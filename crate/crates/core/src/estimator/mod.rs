//! Cost prediction and exploration for client selection.
//!
//! Every estimator maps a client's [`ContextVector`] to a [`CostEstimate`]
//! (seconds per batch, battery percent per batch) and to a [`UcbScore`]
//! whose exploitation term is the negated predicted batch time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{ClientId, CostSample};

pub mod bank;
pub mod confidence;
pub mod linucb;
pub mod mlp;
pub mod neural;
pub mod regret;

pub use bank::{BankConfig, EstimatorBank, EstimatorKind};
pub use confidence::ConfidenceState;
pub use linucb::LinUcb;
pub use mlp::Mlp;
pub use neural::{NeuralConfig, NeuralUcb, TrainConfig};
pub use regret::{RegretMode, RegretTracker};

/// Smallest cost an estimator will report.
pub const MIN_COST: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("architecture: {0}")]
    Architecture(String),
    #[error("confidence matrix is no longer positive definite; re-initialise")]
    NotPositiveDefinite,
    #[error("unknown client {0}")]
    UnknownClient(String),
    #[error("observation log: {0}")]
    Log(String),
    #[error("config: {0}")]
    Config(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Seconds per batch.
    pub batch_time: f64,
    /// Battery percent per batch.
    pub battery_drop: f64,
}

impl CostEstimate {
    pub fn new(batch_time: f64, battery_drop: f64) -> Self {
        Self {
            batch_time,
            battery_drop,
        }
    }

    /// Floors both channels at [`MIN_COST`]; NaN maps to the floor too.
    pub fn clamped(self) -> Self {
        let floor = |v: f64| if v >= MIN_COST { v } else { MIN_COST };
        Self {
            batch_time: floor(self.batch_time),
            battery_drop: floor(self.battery_drop),
        }
    }
}

impl From<CostSample> for CostEstimate {
    fn from(s: CostSample) -> Self {
        Self::new(s.batch_time, s.battery_drop)
    }
}

/// Optimistic score in seconds: `value = exploitation + bonus`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcbScore {
    pub value: f64,
    pub exploitation: f64,
    pub bonus: f64,
}

impl UcbScore {
    pub fn new(exploitation: f64, bonus: f64) -> Self {
        Self {
            value: exploitation + bonus,
            exploitation,
            bonus,
        }
    }
}

/// Divisors that bring raw costs to O(1) for the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetScale {
    pub batch_time: f64,
    pub battery_drop: f64,
}

impl Default for TargetScale {
    fn default() -> Self {
        Self {
            batch_time: 1000.0,
            battery_drop: 10.0,
        }
    }
}

impl TargetScale {
    pub fn normalise(&self, c: CostEstimate) -> [f64; 2] {
        [c.batch_time / self.batch_time, c.battery_drop / self.battery_drop]
    }

    pub fn denormalise(&self, y: &[f64]) -> CostEstimate {
        CostEstimate::new(y[0] * self.batch_time, y[1] * self.battery_drop)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub seq: u64,
    pub round: usize,
    pub client: ClientId,
    pub features: Vec<f64>,
    pub cost: CostEstimate,
}

/// Append-only record of observed (features, cost) pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationLog {
    records: Vec<Observation>,
}

impl ObservationLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects entries from a round earlier than the last one recorded.
    pub fn append(
        &mut self,
        round: usize,
        client: ClientId,
        features: Vec<f64>,
        cost: CostEstimate,
    ) -> Result<u64, EstimatorError> {
        if let Some(last) = self.records.last() {
            if round < last.round {
                return Err(EstimatorError::Log(format!(
                    "round {round} recorded after round {}",
                    last.round
                )));
            }
        }
        let seq = self.records.len() as u64;
        self.records.push(Observation {
            seq,
            round,
            client,
            features,
            cost,
        });
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }
}

/// The `min(k, n)` highest-scoring clients; ties go to the smaller id.
pub fn select_top<'a, I>(scores: I, k: usize) -> Vec<ClientId>
where
    I: IntoIterator<Item = (&'a ClientId, &'a UcbScore)>,
{
    let mut ranked: Vec<(&ClientId, f64)> = scores
        .into_iter()
        .map(|(id, s)| {
            let v = if s.value.is_nan() {
                f64::NEG_INFINITY
            } else {
                s.value
            };
            (id, v)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(id, _)| id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<ClientId, UcbScore> {
        pairs
            .iter()
            .map(|(id, v)| (ClientId::new(*id), UcbScore::new(*v, 0.0)))
            .collect()
    }

    #[test]
    fn top_two_by_value() {
        let s = scores(&[("a", 5.0), ("b", 3.0), ("c", 4.0)]);
        let ids: Vec<String> = select_top(&s, 2).into_iter().map(|c| c.0).collect();
        assert_eq!(ids, ["a", "c"]);
    }

    #[test]
    fn k_beyond_population_returns_everyone() {
        let s = scores(&[("a", 1.0), ("b", 2.0)]);
        assert_eq!(select_top(&s, 5).len(), 2);
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let s = scores(&[("c", 1.0), ("a", 1.0), ("b", 1.0)]);
        let ids: Vec<String> = select_top(&s, 2).into_iter().map(|c| c.0).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn clamping_floors_nonpositive_and_nan() {
        let c = CostEstimate::new(-3.0, f64::NAN).clamped();
        assert_eq!(c, CostEstimate::new(MIN_COST, MIN_COST));
        assert_eq!(CostEstimate::new(2.0, 0.5).clamped(), CostEstimate::new(2.0, 0.5));
    }

    #[test]
    fn log_rejects_earlier_rounds() {
        let mut log = ObservationLog::new();
        let c = CostEstimate::new(1.0, 1.0);
        assert_eq!(log.append(3, ClientId::new("a"), vec![], c).unwrap(), 0);
        assert_eq!(log.append(3, ClientId::new("b"), vec![], c).unwrap(), 1);
        assert!(log.append(2, ClientId::new("a"), vec![], c).is_err());
    }
}
