//! Fleet configuration files, built-in fleets and trajectory dumps.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::context::ClientId;
use super::profile::{BackgroundLoad, ChargingSchedule, DeviceProfile};
use super::sim::SimDevice;
use super::DeviceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub devices: Vec<DeviceProfile>,
}

impl FleetConfig {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.devices.is_empty() {
            return Err(DeviceError::Fleet("fleet has no devices".into()));
        }
        let mut ids = BTreeSet::new();
        for d in &self.devices {
            d.validate()?;
            if !ids.insert(&d.id) {
                return Err(DeviceError::Fleet(format!("duplicate device id {}", d.id)));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, DeviceError> {
        let fleet: FleetConfig =
            serde_json::from_str(s).map_err(|e| DeviceError::Fleet(e.to_string()))?;
        fleet.validate()?;
        Ok(fleet)
    }

    pub fn load(path: &Path) -> Result<Self, DeviceError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| DeviceError::Fleet(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fleet serialises")
    }

    pub fn ids(&self) -> Vec<ClientId> {
        self.devices.iter().map(|d| d.id.clone()).collect()
    }

    pub fn get(&self, id: &ClientId) -> Option<&DeviceProfile> {
        self.devices.iter().find(|d| &d.id == id)
    }

    /// Keeps the first `n` devices.
    pub fn truncated(&self, n: usize) -> FleetConfig {
        FleetConfig {
            devices: self.devices.iter().take(n).cloned().collect(),
        }
    }

    pub fn instantiate(&self, experiment_seed: u64) -> Result<Vec<SimDevice>, DeviceError> {
        self.devices
            .iter()
            .map(|p| SimDevice::new(p.clone(), experiment_seed))
            .collect()
    }

    /// Four phones shaped after the hardware roster: two same-model fast
    /// phones of different wear, one old slow phone with a steep
    /// low-battery penalty, and one mid-range phone.
    pub fn table1() -> Self {
        let cycle = ChargingSchedule::Cycle {
            plug_in_below: 12.0,
            unplug_at: 95.0,
            recharge_per_round: 20.0,
        };
        let base = DeviceProfile {
            charging: cycle,
            background: BackgroundLoad {
                mean: 0.35,
                reversion: 0.15,
                volatility: 0.18,
                max: 1.0,
            },
            ..Default::default()
        };
        FleetConfig {
            devices: vec![
                DeviceProfile {
                    id: ClientId::new("oneplus-7t-1"),
                    base_batch_time: 200.0,
                    base_battery_drop: 0.9,
                    age_factor: 1.0,
                    total_ram: 8.0,
                    perf_index: 480_000.0,
                    ram_sensitivity: 0.8,
                    low_battery_penalty: 1.4,
                    initial_battery: 92.0,
                    dialect: 0.1,
                    seed: 1,
                    ..base.clone()
                },
                DeviceProfile {
                    id: ClientId::new("oneplus-7t-2"),
                    base_batch_time: 200.0,
                    base_battery_drop: 0.9,
                    age_factor: 1.6,
                    total_ram: 8.0,
                    perf_index: 480_000.0,
                    ram_sensitivity: 0.8,
                    low_battery_penalty: 1.8,
                    initial_battery: 64.0,
                    dialect: 0.35,
                    seed: 2,
                    ..base.clone()
                },
                DeviceProfile {
                    id: ClientId::new("oneplus-5t"),
                    base_batch_time: 300.0,
                    base_battery_drop: 1.1,
                    age_factor: 1.3,
                    total_ram: 6.0,
                    perf_index: 260_000.0,
                    ram_sensitivity: 1.6,
                    low_battery_penalty: 2.4,
                    initial_battery: 45.0,
                    dialect: 0.6,
                    seed: 3,
                    ..base.clone()
                },
                DeviceProfile {
                    id: ClientId::new("xiaomi-11-pro"),
                    base_batch_time: 260.0,
                    base_battery_drop: 0.8,
                    age_factor: 1.0,
                    total_ram: 8.0,
                    perf_index: 350_000.0,
                    ram_sensitivity: 1.2,
                    cpu_sensitivity: 0.5,
                    low_battery_penalty: 1.6,
                    initial_battery: 78.0,
                    dialect: 0.85,
                    seed: 4,
                    ..base
                },
            ],
        }
    }

    /// Two slow and two fast always-charging devices whose ideal batch
    /// times match the slow-vs-fast pair (430 s and 233 s).
    pub fn slow_fast() -> Self {
        let base = DeviceProfile {
            base_battery_drop: 1.72,
            charging_offset: 0.6,
            charging: ChargingSchedule::Always {
                recharge_per_round: 30.0,
            },
            ram_sensitivity: 0.3,
            cpu_sensitivity: 0.1,
            background: BackgroundLoad {
                mean: 0.2,
                reversion: 0.3,
                volatility: 0.08,
                max: 0.6,
            },
            ..Default::default()
        };
        let mk = |id: &str, time: f64, ram: f64, pi: f64, dialect: f64, seed: u64| DeviceProfile {
            id: ClientId::new(id),
            base_batch_time: time,
            total_ram: ram,
            perf_index: pi,
            dialect,
            seed,
            ..base.clone()
        };
        FleetConfig {
            devices: vec![
                mk("fast-1", 233.0, 8.0, 480_000.0, 0.2, 11),
                mk("fast-2", 233.0, 8.0, 480_000.0, 0.4, 12),
                mk("slow-1", 430.0, 6.0, 260_000.0, 0.6, 13),
                mk("slow-2", 430.0, 6.0, 260_000.0, 0.8, 14),
            ],
        }
    }

    /// `n` always-charging mid-range devices with evenly spread dialects,
    /// for model-quality experiments.
    pub fn dialect_pool(n: usize) -> Self {
        let devices = (0..n)
            .map(|i| DeviceProfile {
                id: ClientId::new(format!("client-{i:02}")),
                base_batch_time: 200.0 + 20.0 * (i % 5) as f64,
                charging: ChargingSchedule::Always {
                    recharge_per_round: 50.0,
                },
                dialect: if n > 1 {
                    i as f64 / (n - 1) as f64
                } else {
                    0.5
                },
                seed: 100 + i as u64,
                ..Default::default()
            })
            .collect();
        FleetConfig { devices }
    }
}

/// Writes `round,device,TR,AR,AC,BS,CI,PI,batch_time,battery_drop` rows for a
/// fleet in which every live device trains `batches_per_round` batches each
/// round. Values are printed with shortest round-trip precision.
pub fn write_trajectory<W: Write>(
    fleet: &FleetConfig,
    experiment_seed: u64,
    rounds: usize,
    batches_per_round: usize,
    out: &mut W,
) -> Result<(), DeviceError> {
    let io = |e: std::io::Error| DeviceError::Fleet(e.to_string());
    let mut devices = fleet.instantiate(experiment_seed)?;
    writeln!(out, "round,device,TR,AR,AC,BS,CI,PI,batch_time,battery_drop").map_err(io)?;
    for t in 0..rounds {
        for d in devices.iter_mut() {
            if let Ok(c) = d.sample_context(t) {
                let run = d.step_training(batches_per_round);
                let (bt, dr) = run
                    .mean_cost
                    .map(|c| (c.batch_time, c.battery_drop))
                    .unwrap_or((0.0, 0.0));
                writeln!(
                    out,
                    "{t},{},{},{},{},{},{},{},{bt},{dr}",
                    d.id(),
                    c.total_ram,
                    c.available_ram,
                    c.battery,
                    u8::from(c.battery_status),
                    c.cpu_usage,
                    c.perf_index
                )
                .map_err(io)?;
            }
            d.idle();
        }
    }
    Ok(())
}
