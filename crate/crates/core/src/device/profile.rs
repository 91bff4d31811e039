use serde::{Deserialize, Serialize};

use super::context::ClientId;
use super::DeviceError;

/// Mean-reverting random walk driving background load in `[0, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundLoad {
    pub mean: f64,
    pub reversion: f64,
    pub volatility: f64,
    pub max: f64,
}

impl Default for BackgroundLoad {
    fn default() -> Self {
        Self {
            mean: 0.3,
            reversion: 0.2,
            volatility: 0.12,
            max: 1.0,
        }
    }
}

impl BackgroundLoad {
    /// No background apps: load pinned at zero.
    pub fn idle() -> Self {
        Self {
            mean: 0.0,
            reversion: 0.0,
            volatility: 0.0,
            max: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChargingSchedule {
    Never,
    Always {
        recharge_per_round: f64,
    },
    /// Plugged in once the battery drops below `plug_in_below`, unplugged
    /// once it reaches `unplug_at`.
    Cycle {
        plug_in_below: f64,
        unplug_at: f64,
        recharge_per_round: f64,
    },
}

/// Static description of one simulated device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceProfile {
    pub id: ClientId,
    /// Seconds per batch under ideal conditions.
    pub base_batch_time: f64,
    /// Battery percent per batch under ideal conditions.
    pub base_battery_drop: f64,
    /// Wear multiplier (>= 1) on both time and drain.
    pub age_factor: f64,
    pub total_ram: f64,
    pub perf_index: f64,
    /// Fraction of total RAM free with no background apps.
    pub idle_free_ram: f64,
    /// Fraction of the idle-free RAM consumed at full background load.
    pub ram_pressure: f64,
    pub ram_sensitivity: f64,
    pub idle_cpu: f64,
    pub busy_cpu: f64,
    pub cpu_sensitivity: f64,
    /// Time multiplier reached deep in the low-battery band.
    pub low_battery_penalty: f64,
    /// Battery percent below which the penalty starts ramping in.
    pub low_battery_threshold: f64,
    /// Battery percent at and below which the full penalty applies.
    pub low_battery_floor: f64,
    /// Fraction of drain cancelled while charging.
    pub charging_offset: f64,
    /// Log-normal sigma of multiplicative batch-time noise.
    pub noise_sigma: f64,
    pub background: BackgroundLoad,
    pub charging: ChargingSchedule,
    pub initial_battery: f64,
    pub n_train: usize,
    pub n_val: usize,
    /// Distribution-shift parameter of the client's local data.
    pub dialect: f64,
    pub seed: u64,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self {
            id: ClientId::new("device"),
            base_batch_time: 250.0,
            base_battery_drop: 1.0,
            age_factor: 1.0,
            total_ram: 8.0,
            perf_index: 500_000.0,
            idle_free_ram: 0.6,
            ram_pressure: 0.6,
            ram_sensitivity: 1.0,
            idle_cpu: 8.0,
            busy_cpu: 70.0,
            cpu_sensitivity: 0.3,
            low_battery_penalty: 1.5,
            low_battery_threshold: 20.0,
            low_battery_floor: 15.0,
            charging_offset: 0.5,
            noise_sigma: 0.02,
            background: BackgroundLoad::default(),
            charging: ChargingSchedule::Never,
            initial_battery: 100.0,
            n_train: 25,
            n_val: 10,
            dialect: 0.5,
            seed: 0,
        }
    }
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let mut bad = Vec::new();
        let mut check = |cond: bool, field: &str| {
            if !cond {
                bad.push(field.to_owned());
            }
        };
        check(self.base_batch_time > 0.0, "base_batch_time");
        check(self.base_battery_drop > 0.0, "base_battery_drop");
        check(self.age_factor >= 1.0, "age_factor");
        check(self.total_ram > 0.0, "total_ram");
        check(self.perf_index > 0.0, "perf_index");
        check(
            self.idle_free_ram > 0.0 && self.idle_free_ram <= 1.0,
            "idle_free_ram",
        );
        check((0.0..=1.0).contains(&self.ram_pressure), "ram_pressure");
        check(self.ram_sensitivity >= 0.0, "ram_sensitivity");
        check(
            (0.0..=100.0).contains(&self.idle_cpu)
                && (0.0..=100.0).contains(&self.busy_cpu)
                && self.idle_cpu <= self.busy_cpu,
            "idle_cpu/busy_cpu",
        );
        check(self.cpu_sensitivity >= 0.0, "cpu_sensitivity");
        check(self.low_battery_penalty >= 1.0, "low_battery_penalty");
        check(
            self.low_battery_floor < self.low_battery_threshold,
            "low_battery_floor",
        );
        check(
            (0.0..=1.0).contains(&self.charging_offset),
            "charging_offset",
        );
        check(self.noise_sigma >= 0.0, "noise_sigma");
        check(
            (0.0..=100.0).contains(&self.initial_battery),
            "initial_battery",
        );
        check(
            self.background.max >= 0.0 && self.background.max <= 1.0,
            "background.max",
        );
        check(self.n_train > 0 && self.n_val > 0, "n_train/n_val");
        check((0.0..=1.0).contains(&self.dialect), "dialect");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DeviceError::InvalidProfile {
                id: self.id.to_string(),
                fields: bad,
            })
        }
    }

    /// Time multiplier from available-RAM fraction; 1 at `frac = 1`,
    /// strictly increasing as `frac` falls.
    pub fn ram_factor(&self, frac: f64) -> f64 {
        let short = (1.0 - frac.clamp(0.0, 1.0)).max(0.0);
        1.0 + self.ram_sensitivity * short * short
    }

    /// Time multiplier from battery level: 1 at or above the threshold,
    /// linear ramp to the full penalty at the floor, flat below it.
    pub fn battery_factor(&self, battery: f64) -> f64 {
        if battery >= self.low_battery_threshold {
            1.0
        } else if battery <= self.low_battery_floor {
            self.low_battery_penalty
        } else {
            let span = self.low_battery_threshold - self.low_battery_floor;
            let depth = (self.low_battery_threshold - battery) / span;
            1.0 + (self.low_battery_penalty - 1.0) * depth
        }
    }

    pub fn cpu_factor(&self, cpu_usage: f64) -> f64 {
        1.0 + self.cpu_sensitivity * cpu_usage.clamp(0.0, 100.0) / 100.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factors_are_unity_under_ideal_conditions() {
        let p = DeviceProfile::default();
        assert_eq!(p.ram_factor(1.0), 1.0);
        assert_eq!(p.battery_factor(100.0), 1.0);
        assert_eq!(p.battery_factor(20.0), 1.0);
        assert_eq!(p.cpu_factor(0.0), 1.0);
    }

    #[test]
    fn battery_ramp_reaches_penalty() {
        let p = DeviceProfile {
            low_battery_penalty: 2.4,
            ..Default::default()
        };
        assert_eq!(p.battery_factor(15.0), 2.4);
        assert_eq!(p.battery_factor(5.0), 2.4);
        assert!((p.battery_factor(17.5) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn validation_lists_fields() {
        let p = DeviceProfile {
            age_factor: 0.5,
            base_batch_time: 0.0,
            ..Default::default()
        };
        match p.validate() {
            Err(DeviceError::InvalidProfile { fields, .. }) => {
                assert!(fields.contains(&"age_factor".to_string()));
                assert!(fields.contains(&"base_batch_time".to_string()));
            }
            other => panic!("{other:?}"),
        }
    }
}
