//! Server-side round state machine.
//!
//! A round moves `Collecting -> Training -> Closed`: contexts are gathered
//! from every registered client, the selection strategy runs once, chosen
//! clients upload updates, and [`Coordinator::finalize`] aggregates whatever
//! arrived within the logical deadline.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::message::{ContextReport, Directive, RoundStatus, UpdateMeta, UploadedUpdate};
use super::ProtocolError;
use crate::aggregation::{AggregationStrategy, ClientUpdate};
use crate::device::{ClientId, ContextVector};
use crate::estimator::{select_top, CostEstimate, EstimatorBank, EstimatorKind, UcbScore, MIN_COST};
use crate::model::{
    error_rate, flatten_weights, load_flat_weights, FlatWeights, ModelWeights, Samples, TensorSpec,
};
use crate::seeding::derive_seed;
use crate::selection::{
    assess, plan_round, random_select, CandidateAssessment, SelectionConfig, SelectionError,
    SelectionPlan, SelectionStrategy,
};

const RANDOM_STREAM: u64 = 0x5e1ec7;

/// Deadline and warmup rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundPolicy {
    /// Deadline as a multiple of the round time budget.
    pub deadline_factor: f64,
    /// Logical deadline (seconds) for plans without a time budget.
    pub fallback_deadline: f64,
    /// No deadline at all: a missing client stalls the round.
    pub paper_fidelity: bool,
    /// Rounds of round-robin exploration before a learning strategy takes over.
    pub warmup_rounds: usize,
    /// Battery percent per batch assumed when screening warmup candidates.
    pub warmup_drop_prior: f64,
}

impl Default for RoundPolicy {
    fn default() -> Self {
        Self {
            deadline_factor: 1.5,
            fallback_deadline: 86_400.0,
            paper_fidelity: false,
            warmup_rounds: 20,
            warmup_drop_prior: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Collecting,
    Training,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub estimate: CostEstimate,
    pub score: UcbScore,
}

/// Everything the server knows about one finished round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    pub warmup: bool,
    pub plan: Option<SelectionPlan>,
    pub contexts: BTreeMap<ClientId, ContextVector>,
    pub predictions: BTreeMap<ClientId, Prediction>,
    pub updates: BTreeMap<ClientId, UpdateMeta>,
    pub accepted: Vec<ClientId>,
    /// Uploaded after the deadline; not aggregated.
    pub late: Vec<ClientId>,
    /// Chosen but never uploaded.
    pub missing: Vec<ClientId>,
    pub deadline: Option<f64>,
    /// Logical seconds from the start of training to aggregation; `None`
    /// when the round stalled.
    pub round_time: Option<f64>,
    /// Per accepted client: aggregation instant minus its own finish.
    pub waiting: BTreeMap<ClientId, f64>,
    pub stalled: bool,
    pub aggregated: Option<FlatWeights>,
    pub global_error: f64,
}

impl RoundOutcome {
    pub fn skipped(&self) -> bool {
        self.plan.as_ref().is_none_or(SelectionPlan::is_empty)
    }

    pub fn status(&self) -> RoundStatus {
        if self.aggregated.is_some() {
            RoundStatus::Aggregated
        } else {
            RoundStatus::Voided
        }
    }

    pub fn max_waiting(&self) -> f64 {
        self.waiting.values().copied().fold(0.0, f64::max)
    }

    pub fn total_waiting(&self) -> f64 {
        self.waiting.values().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Coordinator {
    clients: Vec<ClientId>,
    strategy: SelectionStrategy,
    selection: SelectionConfig,
    aggregation: AggregationStrategy,
    policy: RoundPolicy,
    bank: Option<EstimatorBank>,
    manifest: Vec<TensorSpec>,
    global: ModelWeights,
    test_set: Samples,
    rng: ChaCha8Rng,
    round: usize,
    phase: Phase,
    reports: BTreeMap<ClientId, ContextReport>,
    plan: Option<SelectionPlan>,
    warmup: bool,
    predictions: BTreeMap<ClientId, Prediction>,
    deadline: Option<f64>,
    updates: BTreeMap<ClientId, UploadedUpdate>,
    last: Option<(usize, RoundStatus, FlatWeights)>,
    seen: BTreeMap<ClientId, SeenCost>,
}

/// Worst per-batch costs a client has actually shown, split by charging
/// state (index 0 discharging, 1 charging).
#[derive(Debug, Clone, Copy, Default)]
struct SeenCost {
    batch_time: f64,
    battery_drop: [Option<f64>; 2],
}

#[allow(clippy::too_many_arguments)]
impl Coordinator {
    pub fn new(
        mut clients: Vec<ClientId>,
        strategy: SelectionStrategy,
        selection: SelectionConfig,
        aggregation: AggregationStrategy,
        policy: RoundPolicy,
        bank: Option<EstimatorBank>,
        global: ModelWeights,
        test_set: Samples,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        selection
            .validate()
            .map_err(|e| ProtocolError::Session(e.to_string()))?;
        if strategy != SelectionStrategy::Random && bank.is_none() {
            return Err(ProtocolError::Session(format!(
                "strategy {strategy} needs an estimator bank"
            )));
        }
        clients.sort();
        clients.dedup();
        Ok(Self {
            clients,
            strategy,
            selection,
            aggregation,
            policy,
            bank,
            manifest: global.manifest().to_vec(),
            global,
            test_set,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[RANDOM_STREAM])),
            round: 0,
            phase: Phase::Idle,
            reports: BTreeMap::new(),
            plan: None,
            warmup: false,
            predictions: BTreeMap::new(),
            deadline: None,
            updates: BTreeMap::new(),
            last: None,
            seen: BTreeMap::new(),
        })
    }

    pub fn clients(&self) -> &[ClientId] {
        &self.clients
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn strategy(&self) -> SelectionStrategy {
        self.strategy
    }

    pub fn selection_config(&self) -> &SelectionConfig {
        &self.selection
    }

    pub fn bank(&self) -> Option<&EstimatorBank> {
        self.bank.as_ref()
    }

    pub fn global(&self) -> &ModelWeights {
        &self.global
    }

    pub fn manifest(&self) -> &[TensorSpec] {
        &self.manifest
    }

    pub fn test_set(&self) -> &Samples {
        &self.test_set
    }

    /// Error rate of the current global model on the held-out test set.
    pub fn global_error(&self) -> Result<f64, ProtocolError> {
        error_rate(&self.global, &self.test_set).map_err(|e| ProtocolError::Session(e.to_string()))
    }

    pub fn global_flat(&self) -> FlatWeights {
        flatten_weights(&self.global).expect("global weights are consistent")
    }

    pub fn plan(&self) -> Option<&SelectionPlan> {
        self.plan.as_ref()
    }

    pub fn deadline(&self) -> Option<f64> {
        self.deadline
    }

    /// Status and weights of the most recently finalised round.
    pub fn last_result(&self) -> Option<(usize, RoundStatus, &FlatWeights)> {
        self.last.as_ref().map(|(r, s, w)| (*r, *s, w))
    }

    fn known(&self, id: &ClientId) -> Result<(), ProtocolError> {
        if self.clients.binary_search(id).is_ok() {
            Ok(())
        } else {
            Err(ProtocolError::Session(format!("unknown client {id}")))
        }
    }

    pub fn begin_round(&mut self, round: usize) {
        self.round = round;
        self.phase = Phase::Collecting;
        self.reports.clear();
        self.plan = None;
        self.warmup = false;
        self.predictions.clear();
        self.deadline = None;
        self.updates.clear();
    }

    pub fn receive_context(&mut self, id: &ClientId, report: ContextReport) -> Result<(), ProtocolError> {
        self.known(id)?;
        if self.phase != Phase::Collecting {
            return Err(ProtocolError::Session(format!(
                "context from {id} outside the collection phase"
            )));
        }
        self.reports.insert(id.clone(), report);
        Ok(())
    }

    pub fn has_reported(&self, id: &ClientId) -> bool {
        self.reports.contains_key(id)
    }

    pub fn all_reported(&self) -> bool {
        self.reports.len() == self.clients.len()
    }

    /// Marks every silent client unavailable, e.g. after a connect timeout.
    pub fn fill_missing_reports(&mut self) {
        for id in &self.clients {
            self.reports
                .entry(id.clone())
                .or_insert_with(|| ContextReport::Unavailable {
                    reason: "no report".into(),
                });
        }
    }

    fn learning(&self) -> bool {
        self.bank
            .as_ref()
            .is_some_and(|b| b.kind() != EstimatorKind::Frozen)
            && self.strategy != SelectionStrategy::Random
    }

    fn prior(&self) -> CostEstimate {
        CostEstimate::new(0.0, self.policy.warmup_drop_prior).clamped()
    }

    /// Runs selection over the collected reports and opens the training phase.
    pub fn close_collection(&mut self) -> Result<(), ProtocolError> {
        if self.phase != Phase::Collecting {
            return Err(ProtocolError::Session("selection outside collection phase".into()));
        }
        let available: Vec<(ClientId, ContextVector, usize)> = self
            .reports
            .iter()
            .filter_map(|(id, r)| match r {
                ContextReport::Context { context, n_samples } => {
                    Some((id.clone(), *context, *n_samples))
                }
                ContextReport::Unavailable { .. } => None,
            })
            .collect();
        if let Some(bank) = &self.bank {
            for (id, ctx, _) in &available {
                let estimate = bank
                    .predict(id, ctx)
                    .map_err(|e| ProtocolError::Session(e.to_string()))?;
                let score = bank
                    .score(id, ctx)
                    .map_err(|e| ProtocolError::Session(e.to_string()))?;
                self.predictions.insert(id.clone(), Prediction { estimate, score });
            }
        }
        self.warmup = self.learning() && self.round < self.policy.warmup_rounds;
        let plan = if available.is_empty() {
            None
        } else if self.warmup {
            self.round_robin(&available)
        } else {
            self.select(&available)?
        };
        self.deadline = match (&plan, self.policy.paper_fidelity) {
            (_, true) | (None, _) => None,
            (Some(p), false) => Some(match p.time_budget {
                Some(m) => self.policy.deadline_factor * m,
                None => self.policy.fallback_deadline,
            }),
        };
        if let Some(p) = &plan {
            debug!(
                "round {}: chose {:?} epochs {:?} budget {:?}",
                self.round, p.chosen, p.epochs, p.time_budget
            );
        }
        self.plan = plan;
        self.phase = Phase::Training;
        Ok(())
    }

    fn candidates(
        &self,
        available: &[(ClientId, ContextVector, usize)],
        cfg: &SelectionConfig,
    ) -> Vec<CandidateAssessment> {
        let learning = self.learning();
        // Stand-in batch time for clients never observed: the slowest cost
        // seen so far, so an untrained model cannot shrink the budget.
        let unseen_time = self
            .seen
            .values()
            .map(|c| c.batch_time)
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            .unwrap_or_else(|| {
                self.predictions
                    .values()
                    .map(|p| p.estimate.batch_time)
                    .fold(MIN_COST, f64::max)
            });
        available
            .iter()
            .map(|(id, ctx, n)| {
                let mut est = self
                    .predictions
                    .get(id)
                    .map(|p| p.estimate)
                    .unwrap_or_else(|| self.prior());
                if learning {
                    est = self.guarded(id, ctx, est, unseen_time);
                }
                assess(id, ctx, est, *n, cfg)
            })
            .collect()
    }

    /// Never plans with a battery drop below what the client has shown
    /// under the same charging state; unobserved states use the prior. A
    /// batch time stuck at the floor carries no information and is replaced
    /// by the slowest one observed.
    fn guarded(&self, id: &ClientId, ctx: &ContextVector, est: CostEstimate, unseen_time: f64) -> CostEstimate {
        let prior = self.policy.warmup_drop_prior;
        match self.seen.get(id) {
            None => CostEstimate::new(unseen_time, est.battery_drop.max(prior)),
            Some(c) => {
                let shown = c.battery_drop[ctx.battery_status.is_charging() as usize].unwrap_or(prior);
                let time = if est.batch_time <= MIN_COST { c.batch_time } else { est.batch_time };
                CostEstimate::new(time, est.battery_drop.max(shown))
            }
        }
    }

    fn round_robin(&self, available: &[(ClientId, ContextVector, usize)]) -> Option<SelectionPlan> {
        let screened: Vec<CandidateAssessment> = available
            .iter()
            .map(|(id, ctx, n)| assess(id, ctx, self.prior(), *n, &self.selection))
            .collect();
        let eligible: Vec<&ClientId> = screened
            .iter()
            .filter(|a| a.eligible)
            .map(|a| &a.client_id)
            .collect();
        if eligible.is_empty() {
            return None;
        }
        let k = self.selection.k.min(eligible.len());
        let start = (self.round * self.selection.k) % eligible.len();
        let chosen: Vec<ClientId> = (0..k)
            .map(|i| eligible[(start + i) % eligible.len()].clone())
            .collect();
        let epochs = chosen
            .iter()
            .map(|id| (id.clone(), self.selection.e_min))
            .collect();
        Some(SelectionPlan {
            chosen,
            epochs,
            time_budget: None,
            assessments: self.candidates(available, &self.selection),
            overruns: Vec::new(),
        })
    }

    fn select(
        &mut self,
        available: &[(ClientId, ContextVector, usize)],
    ) -> Result<Option<SelectionPlan>, ProtocolError> {
        let cands = self.candidates(available, &self.selection);
        let result = match self.strategy {
            SelectionStrategy::Random => random_select(cands, &self.selection, &mut self.rng),
            SelectionStrategy::ResourceAware => {
                let scores: BTreeMap<ClientId, UcbScore> = self
                    .predictions
                    .iter()
                    .map(|(id, p)| (id.clone(), p.score))
                    .collect();
                plan_round(cands, &scores, &self.selection)
            }
            SelectionStrategy::LinUcb
            | SelectionStrategy::NeuralUcbShared
            | SelectionStrategy::NeuralUcbPerClient => {
                let scores: BTreeMap<ClientId, UcbScore> = self
                    .predictions
                    .iter()
                    .map(|(id, p)| (id.clone(), p.score))
                    .collect();
                let chosen = select_top(&scores, self.selection.k);
                let epochs = chosen
                    .iter()
                    .map(|id| (id.clone(), self.selection.e_max))
                    .collect();
                Ok(SelectionPlan {
                    chosen,
                    epochs,
                    time_budget: None,
                    assessments: cands,
                    overruns: Vec::new(),
                })
            }
        };
        match result {
            Ok(p) => Ok(Some(p)),
            Err(SelectionError::NoEligible) | Err(SelectionError::Empty) => {
                info!("round {}: no eligible clients, skipping", self.round);
                Ok(None)
            }
            Err(e) => Err(ProtocolError::Session(e.to_string())),
        }
    }

    /// Instruction for `id` in the current round.
    pub fn directive(&self, id: &ClientId) -> Directive {
        match self.phase {
            Phase::Idle | Phase::Collecting => Directive::Pending,
            Phase::Training | Phase::Closed => match &self.plan {
                None => Directive::RoundSkipped,
                Some(p) => match p.epochs_for(id) {
                    Some(epochs) => Directive::Selected { epochs },
                    None => Directive::Wait,
                },
            },
        }
    }

    pub fn receive_update(&mut self, id: &ClientId, update: UploadedUpdate) -> Result<(), ProtocolError> {
        self.known(id)?;
        if self.phase != Phase::Training {
            return Err(ProtocolError::Session(format!("update from {id} outside training")));
        }
        if self.directive(id) == Directive::Wait || self.plan.is_none() {
            return Err(ProtocolError::Session(format!("{id} was not selected")));
        }
        if update.weights.len() != self.global_flat_len() {
            return Err(ProtocolError::Session(format!(
                "{id} uploaded {} weights, expected {}",
                update.weights.len(),
                self.global_flat_len()
            )));
        }
        if self.updates.insert(id.clone(), update).is_some() {
            warn!("{id} uploaded twice in round {}; keeping the last", self.round);
        }
        Ok(())
    }

    fn global_flat_len(&self) -> usize {
        self.global.parameter_count()
    }

    /// Chosen clients that have not uploaded yet.
    pub fn awaiting(&self) -> Vec<ClientId> {
        self.plan
            .as_ref()
            .map(|p| {
                p.chosen
                    .iter()
                    .filter(|id| !self.updates.contains_key(*id))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Aggregates the accepted updates, feeds observations to the
    /// estimators and closes the round.
    pub fn finalize(&mut self) -> Result<RoundOutcome, ProtocolError> {
        if self.phase != Phase::Training {
            return Err(ProtocolError::Session("finalize outside training".into()));
        }
        let deadline = self.deadline;
        let limit = deadline.unwrap_or(f64::INFINITY);
        let (mut accepted, mut late) = (Vec::new(), Vec::new());
        for (id, u) in &self.updates {
            if u.meta.elapsed <= limit {
                accepted.push(id.clone());
            } else {
                late.push(id.clone());
            }
        }
        let missing = self.awaiting();
        let stalled = !missing.is_empty() && deadline.is_none();
        let round_time = if self.plan.is_none() {
            Some(0.0)
        } else if stalled {
            None
        } else if missing.is_empty() && late.is_empty() {
            Some(
                accepted
                    .iter()
                    .map(|id| self.updates[id].meta.elapsed)
                    .fold(0.0, f64::max),
            )
        } else {
            deadline
        };
        let waiting = match round_time {
            Some(end) => accepted
                .iter()
                .map(|id| (id.clone(), (end - self.updates[id].meta.elapsed).max(0.0)))
                .collect(),
            None => BTreeMap::new(),
        };

        let aggregated = if stalled || accepted.is_empty() {
            None
        } else {
            let updates: Vec<ClientUpdate> = accepted
                .iter()
                .map(|id| {
                    let u = &self.updates[id];
                    ClientUpdate {
                        client_id: id.clone(),
                        weights: u.weights.clone(),
                        wer: u.meta.wer,
                        n_samples: u.meta.n_samples,
                        batch_time: u.meta.batch_time,
                        battery_drop: u.meta.battery_drop,
                    }
                })
                .collect();
            let flat = self
                .aggregation
                .aggregate(&updates)
                .map_err(|e| ProtocolError::Session(e.to_string()))?;
            self.global = load_flat_weights(&flat, &self.manifest)
                .map_err(|e| ProtocolError::Session(e.to_string()))?;
            Some(flat)
        };
        let global_error = self.global_error()?;

        let contexts: BTreeMap<ClientId, ContextVector> = self
            .reports
            .iter()
            .filter_map(|(id, r)| match r {
                ContextReport::Context { context, .. } => Some((id.clone(), *context)),
                ContextReport::Unavailable { .. } => None,
            })
            .collect();
        if !stalled {
            for (id, u) in &self.updates {
                if let (true, Some(ctx)) = (u.meta.batches_completed > 0, contexts.get(id)) {
                    let c = self.seen.entry(id.clone()).or_default();
                    c.batch_time = c.batch_time.max(u.meta.batch_time);
                    let slot = &mut c.battery_drop[ctx.battery_status.is_charging() as usize];
                    *slot = Some(slot.map_or(u.meta.battery_drop, |d| d.max(u.meta.battery_drop)));
                }
            }
            if let Some(bank) = &mut self.bank {
                for (id, u) in &self.updates {
                    if u.meta.batches_completed == 0 {
                        continue;
                    }
                    if let Some(ctx) = contexts.get(id) {
                        bank.observe(
                            self.round,
                            id,
                            ctx,
                            CostEstimate::new(u.meta.batch_time, u.meta.battery_drop),
                        )
                        .map_err(|e| ProtocolError::Session(e.to_string()))?;
                    }
                }
                bank.end_round();
            }
        }

        let outcome = RoundOutcome {
            round: self.round,
            warmup: self.warmup,
            plan: self.plan.clone(),
            contexts,
            predictions: self.predictions.clone(),
            updates: self.updates.iter().map(|(id, u)| (id.clone(), u.meta)).collect(),
            accepted,
            late,
            missing,
            deadline,
            round_time,
            waiting,
            stalled,
            aggregated,
            global_error,
        };
        self.last = Some((self.round, outcome.status(), self.global_flat()));
        self.phase = Phase::Closed;
        Ok(outcome)
    }
}
