//! The two-client slow/fast and low-battery scenarios, with estimators
//! frozen at fixed per-batch predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, FleetSpec};
use super::experiment::{build_parts, Simulation};
use super::report::RoundReport;
use super::OrchestratorError;
use crate::device::{BackgroundLoad, ChargingSchedule, ClientId, DeviceProfile, FleetConfig};
use crate::estimator::{CostEstimate, EstimatorBank};
use crate::protocol::RoundPolicy;
use crate::selection::{audit_rows, AuditRow, SelectionConfig, SelectionStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioClient {
    pub id: ClientId,
    pub battery: f64,
    pub estimate: CostEstimate,
    pub actual_batch_time: f64,
    pub actual_battery_drop: f64,
}

pub fn scenario_clients(id: u8) -> Result<Vec<ScenarioClient>, OrchestratorError> {
    let c = |name: &str, battery, est: (f64, f64), actual: (f64, f64)| ScenarioClient {
        id: ClientId::new(name),
        battery,
        estimate: CostEstimate::new(est.0, est.1),
        actual_batch_time: actual.0,
        actual_battery_drop: actual.1,
    };
    match id {
        1 => Ok(vec![
            c("client-1", 100.0, (431.93, 1.72), (430.0, 1.72)),
            c("client-2", 100.0, (251.25, 1.72), (233.0, 1.72)),
        ]),
        2 => Ok(vec![
            c("client-1", 60.0, (251.25, 2.2), (233.0, 2.2)),
            c("client-2", 100.0, (130.36, 1.6), (132.0, 1.6)),
        ]),
        other => Err(OrchestratorError::Config(vec![format!(
            "scenario id {other} (expected 1 or 2)"
        )])),
    }
}

/// Noise-free, never-charging devices whose batch cost is exactly the
/// scenario's actual cost.
pub fn scenario_fleet(clients: &[ScenarioClient]) -> FleetConfig {
    let devices = clients
        .iter()
        .enumerate()
        .map(|(i, c)| DeviceProfile {
            id: c.id.clone(),
            base_batch_time: c.actual_batch_time,
            base_battery_drop: c.actual_battery_drop,
            ram_sensitivity: 0.0,
            cpu_sensitivity: 0.0,
            low_battery_penalty: 1.0,
            charging_offset: 0.0,
            noise_sigma: 0.0,
            background: BackgroundLoad::idle(),
            charging: ChargingSchedule::Never,
            initial_battery: c.battery,
            n_train: 25,
            n_val: 10,
            dialect: 0.25 + 0.5 * i as f64,
            seed: i as u64 + 1,
            ..Default::default()
        })
        .collect();
    FleetConfig { devices }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioRecord {
    pub scenario: u8,
    pub strategy: SelectionStrategy,
    pub paper_fidelity: bool,
    pub clients: Vec<ScenarioClient>,
    pub audit: Vec<AuditRow>,
    pub epochs: BTreeMap<ClientId, usize>,
    /// Round time budget in minutes, when the plan has one.
    pub time_budget_min: Option<f64>,
    /// Largest realised waiting time in minutes; `None` if the round never
    /// completed.
    pub waiting_min: Option<f64>,
    pub completed: bool,
    pub battery_after: BTreeMap<ClientId, f64>,
    pub died: Vec<ClientId>,
    pub report: RoundReport,
}

/// Runs one round of scenario `id` under `strategy`. With `paper_fidelity`
/// the server has no deadline.
pub fn scenario_table2(
    id: u8,
    strategy: SelectionStrategy,
    paper_fidelity: bool,
    seed: u64,
) -> Result<ScenarioRecord, OrchestratorError> {
    let clients = scenario_clients(id)?;
    let fleet = scenario_fleet(&clients);
    let cfg = ExperimentConfig {
        name: format!("scenario-{id}-{strategy}"),
        fleet: FleetSpec::Inline {
            fleet: fleet.clone(),
        },
        rounds: 1,
        strategy,
        selection: SelectionConfig::default(),
        policy: RoundPolicy {
            paper_fidelity,
            warmup_rounds: 0,
            ..Default::default()
        },
        seeds: vec![seed],
        ..Default::default()
    };
    cfg.validate()?;
    let frozen = EstimatorBank::frozen(clients.iter().map(|c| (c.id.clone(), c.estimate)).collect());
    let (coord, nodes) = build_parts(&cfg, &fleet, seed, Some(frozen))?;
    let mut sim = Simulation::from_parts(coord, nodes, seed, cfg.estimator.neural.scale)?;
    let report = sim.step()?;
    let plan = report
        .outcome
        .as_ref()
        .and_then(|o| o.plan.clone())
        .ok_or_else(|| OrchestratorError::Config(vec!["scenario selected nobody".into()]))?;
    Ok(ScenarioRecord {
        scenario: id,
        strategy,
        paper_fidelity,
        audit: audit_rows(&plan, &cfg.selection),
        epochs: plan.epochs.clone(),
        time_budget_min: plan.time_budget.map(|m| m / 60.0),
        waiting_min: report.round_time.map(|_| report.max_waiting / 60.0),
        completed: !report.stalled,
        battery_after: sim
            .nodes()
            .iter()
            .map(|n| (n.id().clone(), n.device().battery()))
            .collect(),
        died: report
            .clients
            .iter()
            .filter(|c| c.died)
            .map(|c| c.client_id.clone())
            .collect(),
        clients,
        report,
    })
}
