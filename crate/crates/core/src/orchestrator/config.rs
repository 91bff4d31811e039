use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::aggregation::AggregationStrategy;
use crate::device::FleetConfig;
use crate::estimator::BankConfig;
use crate::protocol::RoundPolicy;
use crate::selection::{SelectionConfig, SelectionStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    InProcess,
    Socket,
}

/// Where the device roster comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FleetSpec {
    Table1,
    SlowFast,
    DialectPool { n: usize },
    File { path: PathBuf },
    Inline { fleet: FleetConfig },
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec::Table1
    }
}

impl FleetSpec {
    pub fn resolve(&self) -> Result<FleetConfig, OrchestratorError> {
        let fleet = match self {
            FleetSpec::Table1 => FleetConfig::table1(),
            FleetSpec::SlowFast => FleetConfig::slow_fast(),
            FleetSpec::DialectPool { n } => FleetConfig::dialect_pool(*n),
            FleetSpec::File { path } => FleetConfig::load(path)?,
            FleetSpec::Inline { fleet } => fleet.clone(),
        };
        fleet.validate()?;
        Ok(fleet)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub fleet: FleetSpec,
    /// Keep only the first `n` devices of the fleet.
    pub n_clients: Option<usize>,
    pub rounds: usize,
    pub strategy: SelectionStrategy,
    pub aggregation: AggregationStrategy,
    pub selection: SelectionConfig,
    pub policy: RoundPolicy,
    pub estimator: BankConfig,
    pub seeds: Vec<u64>,
    pub mode: Mode,
    /// Client SGD step size.
    pub learning_rate: f32,
    /// Held-out global test samples drawn per client distribution.
    pub test_per_client: usize,
    /// Trailing rounds averaged for the final estimator MSE.
    pub mse_window: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            fleet: FleetSpec::Table1,
            n_clients: None,
            rounds: 10,
            strategy: SelectionStrategy::ResourceAware,
            aggregation: AggregationStrategy::WerSoftmax,
            selection: SelectionConfig::default(),
            policy: RoundPolicy::default(),
            estimator: BankConfig::default(),
            seeds: vec![0],
            mode: Mode::InProcess,
            learning_rate: 0.1,
            test_per_client: 15,
            mse_window: 25,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, OrchestratorError> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| OrchestratorError::Config(vec![e.to_string()]))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn fleet(&self) -> Result<FleetConfig, OrchestratorError> {
        let fleet = self.fleet.resolve()?;
        Ok(match self.n_clients {
            Some(n) => fleet.truncated(n),
            None => fleet,
        })
    }

    /// Checks every field and lists all the bad ones at once.
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let mut bad = Vec::new();
        let n = match self.fleet() {
            Ok(f) => f.devices.len(),
            Err(e) => {
                bad.push(format!("fleet: {e}"));
                0
            }
        };
        if n == 0 {
            bad.push("fleet: no devices".into());
        }
        if self.n_clients == Some(0) {
            bad.push("n_clients".into());
        }
        if self.rounds < 1 {
            bad.push("rounds".into());
        }
        if n > 0 && self.selection.k > n {
            bad.push(format!("selection.k ({} > {n} clients)", self.selection.k));
        }
        if let Err(crate::selection::SelectionError::Config(fields)) = self.selection.validate() {
            bad.extend(fields.into_iter().map(|f| format!("selection.{f}")));
        }
        if let Err(e) = self.estimator.neural.validate() {
            bad.push(format!("estimator.neural: {e}"));
        }
        if !(self.estimator.linucb_lambda > 0.0) {
            bad.push("estimator.linucb_lambda".into());
        }
        if !(self.estimator.linucb_alpha >= 0.0) {
            bad.push("estimator.linucb_alpha".into());
        }
        if !(self.policy.deadline_factor >= 1.0) {
            bad.push("policy.deadline_factor".into());
        }
        if !(self.policy.fallback_deadline > 0.0) {
            bad.push("policy.fallback_deadline".into());
        }
        if !(self.policy.warmup_drop_prior > 0.0) {
            bad.push("policy.warmup_drop_prior".into());
        }
        if self.seeds.is_empty() {
            bad.push("seeds".into());
        }
        if !(self.learning_rate > 0.0) {
            bad.push("learning_rate".into());
        }
        if self.test_per_client < 1 {
            bad.push("test_per_client".into());
        }
        if self.mse_window < 1 {
            bad.push("mse_window".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(OrchestratorError::Config(bad))
        }
    }
}
