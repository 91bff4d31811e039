//! Experiment driver: builds a fleet of client nodes and a coordinator,
//! runs rounds in-process or over sockets, and writes the round reports.

use thiserror::Error;

pub mod bench;
pub mod config;
pub mod experiment;
pub mod export;
pub mod report;
pub mod scenario;

pub use bench::{bandit_bench, bandit_config, convergence_config, waiting_config, BenchRow};
pub use config::{ExperimentConfig, FleetSpec, Mode};
pub use experiment::{
    build_parts, run_experiment, run_seed, run_socket, summarise, ExperimentResult, RoundSummary,
    SeedRun, Simulation,
};
pub use export::{export_all, fmt_sig6};
pub use report::{fairness, jain_index, ClientRecord, FairnessReport, RoundReport};
pub use scenario::{scenario_table2, ScenarioRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("invalid config fields: {}", .0.join(", "))]
    Config(Vec<String>),
    #[error(transparent)]
    Device(#[from] crate::device::DeviceError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for OrchestratorError {
    fn from(e: std::io::Error) -> Self {
        OrchestratorError::Io(e.to_string())
    }
}
