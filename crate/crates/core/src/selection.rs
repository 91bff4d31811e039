//! Resource-aware client selection with per-client epoch budgets, and the
//! uniform random baseline.
//!
//! A candidate's battery headroom above the floor caps how many batches it
//! may run; the chosen clients' caps fix a round time budget, and each
//! client gets as many epochs as fit inside that budget.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{ClientId, ContextVector};
use crate::estimator::{select_top, CostEstimate, EstimatorKind, UcbScore};

/// Slack applied before integer floors so that exact quotients computed in
/// floating point (e.g. `3768.75 / 251.25`) are not rounded down.
const FLOOR_TOLERANCE: f64 = 1e-9;

fn floor_tol(v: f64) -> f64 {
    (v + FLOOR_TOLERANCE).floor()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("invalid selection config: {0:?}")]
    Config(Vec<String>),
    #[error("no eligible clients this round")]
    NoEligible,
    #[error("no clients available")]
    Empty,
}

/// How the server picks clients each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Uniform sample, `e_max` epochs each, no time budget.
    Random,
    /// Top-k by a shared linear UCB score, `e_max` epochs each.
    #[serde(rename = "linucb")]
    LinUcb,
    /// Top-k by a shared neural UCB score, `e_max` epochs each.
    #[serde(rename = "neuralucb_s")]
    NeuralUcbShared,
    /// Top-k by per-client neural UCB scores, `e_max` epochs each.
    #[serde(rename = "neuralucb_m")]
    NeuralUcbPerClient,
    /// Battery-filtered top-k by per-client neural UCB scores with a round
    /// time budget and per-client epochs.
    ResourceAware,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 5] = [
        SelectionStrategy::Random,
        SelectionStrategy::LinUcb,
        SelectionStrategy::NeuralUcbShared,
        SelectionStrategy::NeuralUcbPerClient,
        SelectionStrategy::ResourceAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::Random => "random",
            SelectionStrategy::LinUcb => "linucb",
            SelectionStrategy::NeuralUcbShared => "neuralucb_s",
            SelectionStrategy::NeuralUcbPerClient => "neuralucb_m",
            SelectionStrategy::ResourceAware => "resource_aware",
        }
    }

    /// Estimator the strategy learns with, if any.
    pub fn estimator(self) -> Option<EstimatorKind> {
        match self {
            SelectionStrategy::Random => None,
            SelectionStrategy::LinUcb => Some(EstimatorKind::LinUcb),
            SelectionStrategy::NeuralUcbShared => Some(EstimatorKind::NeuralShared),
            SelectionStrategy::NeuralUcbPerClient | SelectionStrategy::ResourceAware => {
                Some(EstimatorKind::NeuralPerClient)
            }
        }
    }
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown selection strategy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub k: usize,
    pub e_min: usize,
    pub e_max: usize,
    pub batch_size: usize,
    /// Battery percent a client must keep after training.
    pub battery_floor: f64,
    /// Treat charging devices as having unlimited battery headroom.
    pub charging_bypass: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 2,
            e_min: 1,
            e_max: 7,
            batch_size: 5,
            battery_floor: 20.0,
            charging_bypass: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let mut bad = Vec::new();
        if self.k < 1 {
            bad.push("k".to_owned());
        }
        if self.e_min < 1 || self.e_min > self.e_max {
            bad.push("e_min/e_max".to_owned());
        }
        if self.batch_size < 1 {
            bad.push("batch_size".to_owned());
        }
        if !(0.0..100.0).contains(&self.battery_floor) {
            bad.push("battery_floor".to_owned());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(SelectionError::Config(bad))
        }
    }

    /// `n / bs` as a real number.
    pub fn batches_per_epoch(&self, n: usize) -> f64 {
        n as f64 / self.batch_size as f64
    }

    /// Whole batches a device actually runs per epoch (partial batch dropped).
    pub fn whole_batches_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAssessment {
    pub client_id: ClientId,
    pub battery: f64,
    pub charging: bool,
    pub n_samples: usize,
    pub estimate: CostEstimate,
    /// Batches before reaching the floor; `None` when unbounded.
    pub b_max: Option<u64>,
    pub e_max_t: usize,
    pub eligible: bool,
    pub reason: Option<String>,
}

/// Battery headroom and epoch cap for one candidate.
pub fn assess(
    client_id: &ClientId,
    ctx: &ContextVector,
    estimate: CostEstimate,
    n_samples: usize,
    cfg: &SelectionConfig,
) -> CandidateAssessment {
    let estimate = estimate.clamped();
    let charging = ctx.battery_status.is_charging();
    let mut reason = None;
    let b_max = if cfg.charging_bypass && charging {
        None
    } else if ctx.battery > cfg.battery_floor {
        Some(floor_tol((ctx.battery - cfg.battery_floor) / estimate.battery_drop).max(0.0) as u64)
    } else {
        Some(0)
    };
    let e_max_t = if n_samples < cfg.batch_size {
        reason = Some(format!(
            "{n_samples} samples is less than one batch of {}",
            cfg.batch_size
        ));
        0
    } else {
        match b_max {
            None => cfg.e_max,
            Some(b) => {
                let cap = floor_tol(b as f64 / cfg.batches_per_epoch(n_samples));
                cfg.e_max.min(cap as usize)
            }
        }
    };
    let eligible = reason.is_none() && e_max_t >= cfg.e_min;
    if !eligible && reason.is_none() {
        reason = Some(format!(
            "battery headroom allows {e_max_t} epochs, fewer than {}",
            cfg.e_min
        ));
    }
    CandidateAssessment {
        client_id: client_id.clone(),
        battery: ctx.battery,
        charging,
        n_samples,
        estimate,
        b_max,
        e_max_t,
        eligible,
        reason,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    /// Chosen clients, best first.
    pub chosen: Vec<ClientId>,
    pub epochs: BTreeMap<ClientId, usize>,
    /// Round time budget in seconds; `None` for unbounded plans.
    pub time_budget: Option<f64>,
    pub assessments: Vec<CandidateAssessment>,
    /// Chosen clients whose predicted duration exceeds the budget because
    /// of the `e_min` lower clamp.
    pub overruns: Vec<ClientId>,
}

impl SelectionPlan {
    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }

    pub fn assessment(&self, id: &ClientId) -> Option<&CandidateAssessment> {
        self.assessments.iter().find(|a| &a.client_id == id)
    }

    pub fn epochs_for(&self, id: &ClientId) -> Option<usize> {
        self.epochs.get(id).copied()
    }

    /// `e * (n / bs) * per_batch_time` for each chosen client.
    pub fn durations_with(
        &self,
        cfg: &SelectionConfig,
        batch_time: impl Fn(&CandidateAssessment) -> f64,
    ) -> BTreeMap<ClientId, f64> {
        self.chosen
            .iter()
            .filter_map(|id| {
                let a = self.assessment(id)?;
                let e = self.epochs_for(id)? as f64;
                Some((id.clone(), e * cfg.batches_per_epoch(a.n_samples) * batch_time(a)))
            })
            .collect()
    }

    pub fn predicted_durations(&self, cfg: &SelectionConfig) -> BTreeMap<ClientId, f64> {
        self.durations_with(cfg, |a| a.estimate.batch_time)
    }
}

/// Resource-aware plan: top-k eligible clients by score, then the epoch
/// budget. Ineligible and unscored candidates are never chosen.
pub fn plan_round(
    candidates: Vec<CandidateAssessment>,
    scores: &BTreeMap<ClientId, UcbScore>,
    cfg: &SelectionConfig,
) -> Result<SelectionPlan, SelectionError> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(SelectionError::Empty);
    }
    let eligible: BTreeMap<ClientId, UcbScore> = candidates
        .iter()
        .filter(|a| a.eligible)
        .filter_map(|a| scores.get(&a.client_id).map(|s| (a.client_id.clone(), *s)))
        .collect();
    if eligible.is_empty() {
        return Err(SelectionError::NoEligible);
    }
    let chosen = select_top(&eligible, cfg.k);
    let find = |id: &ClientId| {
        candidates
            .iter()
            .find(|a| &a.client_id == id)
            .expect("chosen from candidates")
    };
    let cap_time = |a: &CandidateAssessment| {
        a.e_max_t as f64 * cfg.batches_per_epoch(a.n_samples) * a.estimate.batch_time
    };
    let budget = chosen
        .iter()
        .map(|id| cap_time(find(id)))
        .fold(f64::INFINITY, f64::min);
    let mut epochs = BTreeMap::new();
    let mut overruns = Vec::new();
    for id in &chosen {
        let a = find(id);
        let per_epoch = cfg.batches_per_epoch(a.n_samples) * a.estimate.batch_time;
        let fit = floor_tol(budget / per_epoch);
        let e = (fit.max(0.0) as usize).clamp(cfg.e_min, a.e_max_t);
        if e as f64 * per_epoch > budget * (1.0 + FLOOR_TOLERANCE) {
            warn!(
                "{id}: e_min forces {:.1} s against a {:.1} s budget",
                e as f64 * per_epoch,
                budget
            );
            overruns.push(id.clone());
        }
        epochs.insert(id.clone(), e);
    }
    Ok(SelectionPlan {
        chosen,
        epochs,
        time_budget: Some(budget),
        assessments: candidates,
        overruns,
    })
}

/// Uniform sample of `min(k, n)` available clients, each asked for `e_max`
/// epochs with no time budget. Chosen ids are listed in ascending order.
pub fn random_select<R: Rng + ?Sized>(
    candidates: Vec<CandidateAssessment>,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<SelectionPlan, SelectionError> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(SelectionError::Empty);
    }
    let k = cfg.k.min(candidates.len());
    let mut chosen: Vec<ClientId> = sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i].client_id.clone())
        .collect();
    chosen.sort();
    let epochs = chosen.iter().map(|id| (id.clone(), cfg.e_max)).collect();
    Ok(SelectionPlan {
        chosen,
        epochs,
        time_budget: None,
        assessments: candidates,
        overruns: Vec::new(),
    })
}

/// Per client: longest duration minus its own.
pub fn waiting_times(durations: &BTreeMap<ClientId, f64>) -> BTreeMap<ClientId, f64> {
    let longest = durations.values().copied().fold(0.0, f64::max);
    durations
        .iter()
        .map(|(id, d)| (id.clone(), longest - d))
        .collect()
}

pub fn predicted_waiting_time(
    plan: &SelectionPlan,
    cfg: &SelectionConfig,
) -> BTreeMap<ClientId, f64> {
    waiting_times(&plan.predicted_durations(cfg))
}

/// One audit line per candidate, carrying every column needed to rebuild
/// the plan by hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub client: ClientId,
    #[serde(rename = "AC")]
    pub battery: f64,
    #[serde(rename = "BS")]
    pub charging: u8,
    pub e_min: usize,
    pub e_max: usize,
    pub batch_time_hat: f64,
    pub battery_drop_hat: f64,
    pub b_max: Option<u64>,
    pub e_max_t: usize,
    pub eligible: bool,
    pub chosen: bool,
    pub m_t: Option<f64>,
    pub epochs: Option<usize>,
}

pub fn audit_rows(plan: &SelectionPlan, cfg: &SelectionConfig) -> Vec<AuditRow> {
    plan.assessments
        .iter()
        .map(|a| AuditRow {
            client: a.client_id.clone(),
            battery: a.battery,
            charging: u8::from(a.charging),
            e_min: cfg.e_min,
            e_max: cfg.e_max,
            batch_time_hat: a.estimate.batch_time,
            battery_drop_hat: a.estimate.battery_drop,
            b_max: a.b_max,
            e_max_t: a.e_max_t,
            eligible: a.eligible,
            chosen: plan.chosen.contains(&a.client_id),
            m_t: plan.time_budget,
            epochs: plan.epochs_for(&a.client_id),
        })
        .collect()
}

pub fn audit_json(plan: &SelectionPlan, cfg: &SelectionConfig) -> String {
    serde_json::to_string_pretty(&audit_rows(plan, cfg)).expect("audit rows serialise")
}
