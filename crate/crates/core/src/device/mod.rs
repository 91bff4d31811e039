//! Simulated heterogeneous edge devices.
//!
//! A [`SimDevice`] reports a [`ContextVector`] before each round and, when
//! asked to train, realises per-batch time and battery drain from a
//! multiplicative cost model: ideal batch time scaled by wear, RAM pressure,
//! low-battery slowdown, CPU contention and log-normal noise.

use thiserror::Error;

pub mod context;
pub mod fleet;
pub mod profile;
pub mod sim;

pub use context::{BatteryStatus, ClientId, ContextVector, FeatureSet};
pub use fleet::{write_trajectory, FleetConfig};
pub use profile::{BackgroundLoad, ChargingSchedule, DeviceProfile};
pub use sim::{expected_cost, CostSample, SimDevice, TrainingRun};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error("device {0} is unavailable (battery empty)")]
    Unavailable(String),
    #[error("device {id}: invalid fields {fields:?}")]
    InvalidProfile { id: String, fields: Vec<String> },
    #[error("fleet: {0}")]
    Fleet(String),
}
