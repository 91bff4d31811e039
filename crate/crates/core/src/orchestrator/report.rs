use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::device::{ClientId, ContextVector};
use crate::estimator::{CostEstimate, RegretTracker, TargetScale};
use crate::protocol::{ClientNode, RoundOutcome, RoundStatus};

/// One client's row in a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: ClientId,
    pub context: Option<ContextVector>,
    pub predicted: Option<CostEstimate>,
    pub ucb: Option<f64>,
    /// Noise-free cost under the reported context.
    pub true_batch_time: Option<f64>,
    pub true_battery_drop: Option<f64>,
    /// Mean realised cost over the batches that ran.
    pub observed_batch_time: Option<f64>,
    pub observed_battery_drop: Option<f64>,
    pub selected: bool,
    pub epochs_assigned: usize,
    pub epochs_completed: usize,
    pub batches_completed: usize,
    pub died: bool,
    pub battery_before: f64,
    pub battery_after: f64,
    /// Logical seconds spent training.
    pub duration: Option<f64>,
    pub waiting: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub seed: u64,
    pub round: usize,
    pub warmup: bool,
    pub skipped: bool,
    pub stalled: bool,
    pub status: RoundStatus,
    pub chosen: Vec<ClientId>,
    pub time_budget: Option<f64>,
    pub deadline: Option<f64>,
    pub round_time: Option<f64>,
    pub clients: Vec<ClientRecord>,
    pub regret: f64,
    pub cumulative_regret: f64,
    /// Mean normalised squared error of the pre-round cost predictions on
    /// the clients whose cost was observed this round.
    pub mse: Option<f64>,
    /// Same error over every available client, observed or not.
    pub mse_all: Option<f64>,
    pub global_error: f64,
    pub max_waiting: f64,
    pub total_waiting: f64,
    #[serde(skip)]
    pub outcome: Option<RoundOutcome>,
}

impl RoundReport {
    pub fn client(&self, id: &ClientId) -> Option<&ClientRecord> {
        self.clients.iter().find(|c| &c.client_id == id)
    }
}

/// Joins a server outcome with the clients' own traces.
pub fn build_report(
    seed: u64,
    outcome: &RoundOutcome,
    nodes: &[ClientNode],
    per_epoch: impl Fn(&ClientNode) -> usize,
    regret: &mut RegretTracker,
    k: usize,
    scale: &TargetScale,
) -> RoundReport {
    let t = outcome.round;
    let plan = outcome.plan.as_ref();
    let mut clients = Vec::with_capacity(nodes.len());
    let mut true_rewards = BTreeMap::new();
    let (mut errors, mut observed_errors) = (Vec::new(), Vec::new());
    for node in nodes {
        let id = node.id();
        let trace = node.trace(t).cloned().unwrap_or_default();
        let run = trace.run;
        let pred = outcome.predictions.get(id);
        if let Some(exp) = trace.expected {
            true_rewards.insert(id.clone(), -exp.batch_time);
            if let Some(p) = pred {
                let truth = scale.normalise(CostEstimate::new(exp.batch_time, exp.battery_drop));
                let guess = scale.normalise(p.estimate);
                let e = 0.5 * ((guess[0] - truth[0]).powi(2) + (guess[1] - truth[1]).powi(2));
                errors.push(e);
                if run.is_some_and(|r| r.batches_completed > 0) {
                    observed_errors.push(e);
                }
            }
        }
        let assigned = plan.and_then(|p| p.epochs_for(id)).unwrap_or(0);
        let batches = run.map_or(0, |r| r.batches_completed);
        let pe = per_epoch(node).max(1);
        clients.push(ClientRecord {
            client_id: id.clone(),
            context: trace.context,
            predicted: pred.map(|p| p.estimate),
            ucb: pred.map(|p| p.score.value),
            true_batch_time: trace.expected.map(|c| c.batch_time),
            true_battery_drop: trace.expected.map(|c| c.battery_drop),
            observed_batch_time: run.and_then(|r| r.mean_cost).map(|c| c.batch_time),
            observed_battery_drop: run.and_then(|r| r.mean_cost).map(|c| c.battery_drop),
            selected: assigned > 0,
            epochs_assigned: assigned,
            epochs_completed: batches / pe,
            batches_completed: batches,
            died: run.is_some_and(|r| r.died),
            battery_before: trace.battery_before,
            battery_after: run.map_or(trace.battery_before, |r| r.battery),
            duration: run.map(|r| r.elapsed),
            waiting: outcome.waiting.get(id).copied(),
            accepted: outcome.accepted.contains(id),
        });
    }
    let chosen: Vec<ClientId> = plan.map(|p| p.chosen.clone()).unwrap_or_default();
    let r = if true_rewards.is_empty() {
        0.0
    } else {
        regret.record(&true_rewards, &BTreeMap::new(), &chosen, k)
    };
    RoundReport {
        seed,
        round: t,
        warmup: outcome.warmup,
        skipped: outcome.skipped(),
        stalled: outcome.stalled,
        status: outcome.status(),
        chosen,
        time_budget: plan.and_then(|p| p.time_budget),
        deadline: outcome.deadline,
        round_time: outcome.round_time,
        clients,
        regret: r,
        cumulative_regret: regret.cumulative,
        mse: mean(&observed_errors),
        mse_all: mean(&errors),
        global_error: outcome.global_error,
        max_waiting: outcome.max_waiting(),
        total_waiting: outcome.total_waiting(),
        outcome: Some(outcome.clone()),
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub seed: u64,
    pub selections: BTreeMap<ClientId, usize>,
    pub jain_index: f64,
}

/// `(sum x)^2 / (n * sum x^2)`; an all-zero allocation counts as perfectly
/// fair.
pub fn jain_index(counts: &[f64]) -> f64 {
    let n = counts.len() as f64;
    let sq: f64 = counts.iter().map(|x| x * x).sum();
    if counts.is_empty() || sq == 0.0 {
        return 1.0;
    }
    let s: f64 = counts.iter().sum();
    s * s / (n * sq)
}

pub fn fairness(seed: u64, clients: &[ClientId], reports: &[RoundReport]) -> FairnessReport {
    let mut selections: BTreeMap<ClientId, usize> = clients.iter().map(|c| (c.clone(), 0)).collect();
    for r in reports {
        for id in &r.chosen {
            *selections.entry(id.clone()).or_default() += 1;
        }
    }
    let counts: Vec<f64> = selections.values().map(|&c| c as f64).collect();
    FairnessReport {
        seed,
        jain_index: jain_index(&counts),
        selections,
    }
}
