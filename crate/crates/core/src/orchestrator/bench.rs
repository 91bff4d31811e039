//! Preset experiment grids: the bandit comparison, the waiting-time
//! comparison and the model-quality sweep over `k`.

use serde::Serialize;

use super::config::{ExperimentConfig, FleetSpec};
use super::experiment::{run_experiment, ExperimentResult};
use super::OrchestratorError;
use crate::aggregation::AggregationStrategy;
use crate::protocol::RoundPolicy;
use crate::selection::{SelectionConfig, SelectionStrategy};

pub const BANDIT_STRATEGIES: [SelectionStrategy; 3] = [
    SelectionStrategy::LinUcb,
    SelectionStrategy::NeuralUcbShared,
    SelectionStrategy::NeuralUcbPerClient,
];

/// Four-phone fleet, two clients a round, one epoch each.
pub fn bandit_config(strategy: SelectionStrategy, rounds: usize, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("bandit-{strategy}"),
        fleet: FleetSpec::Table1,
        rounds,
        strategy,
        selection: SelectionConfig {
            k: 2,
            e_min: 1,
            e_max: 1,
            ..Default::default()
        },
        seeds,
        ..Default::default()
    }
}

/// Two slow and two fast charging devices; learning strategies explore
/// round-robin for `warmup` rounds.
pub fn waiting_config(
    strategy: SelectionStrategy,
    warmup: usize,
    measured: usize,
    seeds: Vec<u64>,
) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("waiting-{strategy}"),
        fleet: FleetSpec::SlowFast,
        rounds: warmup + measured,
        strategy,
        policy: RoundPolicy {
            warmup_rounds: warmup,
            ..Default::default()
        },
        seeds,
        ..Default::default()
    }
}

/// Ten-client dialect pool, random selection, softmax-of-accuracy
/// aggregation.
pub fn convergence_config(k: usize, rounds: usize, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("convergence-k{k}"),
        fleet: FleetSpec::DialectPool { n: 10 },
        rounds,
        strategy: SelectionStrategy::Random,
        aggregation: AggregationStrategy::WerSoftmax,
        selection: SelectionConfig {
            k,
            ..Default::default()
        },
        seeds,
        ..Default::default()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub strategy: SelectionStrategy,
    pub mean_final_mse: f64,
    pub mean_cumulative_regret: f64,
    pub per_seed: Vec<(u64, Option<f64>, f64)>,
}

impl BenchRow {
    pub fn from_result(strategy: SelectionStrategy, result: &ExperimentResult) -> Self {
        let w = result.config.mse_window;
        Self {
            strategy,
            mean_final_mse: result.mean_final_mse(),
            mean_cumulative_regret: result.mean_cumulative_regret(),
            per_seed: result
                .runs
                .iter()
                .map(|r| (r.seed, r.final_mse(w), r.cumulative_regret()))
                .collect(),
        }
    }
}

/// Runs every bandit strategy over the same seeds.
pub fn bandit_bench(rounds: usize, seeds: &[u64]) -> Result<Vec<(BenchRow, ExperimentResult)>, OrchestratorError> {
    BANDIT_STRATEGIES
        .iter()
        .map(|&s| {
            let result = run_experiment(&bandit_config(s, rounds, seeds.to_vec()))?;
            Ok((BenchRow::from_result(s, &result), result))
        })
        .collect()
}
