use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a client device. Ordering is lexicographic and is used for
/// every deterministic tie-break and summation order in the crate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub String);

impl ClientId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClientId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BatteryStatus {
    Discharging = 0,
    Charging = 1,
}

impl BatteryStatus {
    pub fn is_charging(self) -> bool {
        matches!(self, BatteryStatus::Charging)
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }
}

impl From<BatteryStatus> for u8 {
    fn from(b: BatteryStatus) -> u8 {
        b as u8
    }
}

impl TryFrom<u8> for BatteryStatus {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(BatteryStatus::Discharging),
            1 => Ok(BatteryStatus::Charging),
            other => Err(format!("battery status must be 0 or 1, got {other}")),
        }
    }
}

/// Resource snapshot a client reports before a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    /// Total RAM, GB.
    #[serde(rename = "TR")]
    pub total_ram: f64,
    /// Available RAM, GB.
    #[serde(rename = "AR")]
    pub available_ram: f64,
    /// Available battery charge, percent.
    #[serde(rename = "AC")]
    pub battery: f64,
    #[serde(rename = "BS")]
    pub battery_status: BatteryStatus,
    /// Mean CPU usage across cores, percent.
    #[serde(rename = "CI")]
    pub cpu_usage: f64,
    /// Device benchmark score.
    #[serde(rename = "PI")]
    pub perf_index: f64,
}

/// Physical ranges used to scale features into `[0, 1]`.
pub const MAX_RAM_GB: f64 = 16.0;
pub const MAX_PERF_INDEX: f64 = 1_000_000.0;

impl ContextVector {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.total_ram.is_finite()
            && self.available_ram >= 0.0
            && self.available_ram <= self.total_ram
            && (0.0..=100.0).contains(&self.battery)
            && (0.0..=100.0).contains(&self.cpu_usage)
            && self.perf_index > 0.0
            && self.perf_index.is_finite();
        if ok {
            Ok(())
        } else {
            Err(format!("context out of range: {self:?}"))
        }
    }

    /// All six features `[TR, AR, AC, BS, CI, PI]`, scaled to `[0, 1]`.
    pub fn full_features(&self) -> [f64; 6] {
        [
            self.total_ram / MAX_RAM_GB,
            self.available_ram / MAX_RAM_GB,
            self.battery / 100.0,
            self.battery_status.as_f64(),
            self.cpu_usage / 100.0,
            self.perf_index / MAX_PERF_INDEX,
        ]
    }

    /// The four per-device varying features `[AR/TR, AC, BS, CI]`, scaled to
    /// `[0, 1]`. Static device traits (TR, PI) are dropped because a
    /// personalised model sees only one device.
    pub fn personal_features(&self) -> [f64; 4] {
        [
            if self.total_ram > 0.0 {
                self.available_ram / self.total_ram
            } else {
                0.0
            },
            self.battery / 100.0,
            self.battery_status.as_f64(),
            self.cpu_usage / 100.0,
        ]
    }
}

/// Which slice of the context an estimator consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Full,
    Personal,
}

impl FeatureSet {
    pub fn dim(self) -> usize {
        match self {
            FeatureSet::Full => 6,
            FeatureSet::Personal => 4,
        }
    }

    pub fn extract(self, c: &ContextVector) -> Vec<f64> {
        match self {
            FeatureSet::Full => c.full_features().to_vec(),
            FeatureSet::Personal => c.personal_features().to_vec(),
        }
    }
}
