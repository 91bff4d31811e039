use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::context::{BatteryStatus, ClientId, ContextVector};
use super::profile::{ChargingSchedule, DeviceProfile};
use super::DeviceError;
use crate::seeding::derive_seed;

const WALK_STREAM: u64 = 0x57A1;
const COST_STREAM: u64 = 0xC057;

/// Realised per-batch training cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSample {
    /// Seconds per batch.
    pub batch_time: f64,
    /// Battery percent consumed per batch.
    pub battery_drop: f64,
}

/// Result of running a number of training batches on a device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub batches_requested: usize,
    pub batches_completed: usize,
    /// Simulated seconds spent, including a truncated final batch on death.
    pub elapsed: f64,
    pub battery: f64,
    pub died: bool,
    /// Mean cost over completed batches; `None` when no batch completed.
    pub mean_cost: Option<CostSample>,
}

/// Stateful simulator for one device.
#[derive(Debug, Clone)]
pub struct SimDevice {
    profile: DeviceProfile,
    battery: f64,
    charging: bool,
    walk: Vec<f64>,
    walk_rng: ChaCha8Rng,
    cost_rng: ChaCha8Rng,
    current: Option<ContextVector>,
}

impl SimDevice {
    /// Builds a device; all of its randomness is keyed by
    /// `(experiment_seed, profile.seed)`.
    pub fn new(profile: DeviceProfile, experiment_seed: u64) -> Result<Self, DeviceError> {
        profile.validate()?;
        let charging = match profile.charging {
            ChargingSchedule::Never => false,
            ChargingSchedule::Always { .. } => true,
            ChargingSchedule::Cycle { plug_in_below, .. } => profile.initial_battery < plug_in_below,
        };
        let walk_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(experiment_seed, &[profile.seed, WALK_STREAM]));
        let cost_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(experiment_seed, &[profile.seed, COST_STREAM]));
        Ok(Self {
            battery: profile.initial_battery,
            charging,
            walk: vec![profile.background.mean.clamp(0.0, profile.background.max)],
            walk_rng,
            cost_rng,
            current: None,
            profile,
        })
    }

    pub fn id(&self) -> &ClientId {
        &self.profile.id
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn battery(&self) -> f64 {
        self.battery
    }

    pub fn is_alive(&self) -> bool {
        self.battery > 0.0
    }

    pub fn is_charging(&self) -> bool {
        self.charging
    }

    /// Overrides the battery level, e.g. to stage a scenario.
    pub fn set_battery(&mut self, battery: f64) {
        self.battery = battery.clamp(0.0, 100.0);
    }

    /// Background load at round `t`; the walk is generated lazily from its
    /// own stream so the value depends only on the seed and `t`.
    pub fn background_load(&mut self, t: usize) -> f64 {
        let bg = self.profile.background;
        while self.walk.len() <= t {
            let prev = *self.walk.last().expect("walk is never empty");
            let z: f64 = StandardNormal.sample(&mut self.walk_rng);
            let next = prev + bg.reversion * (bg.mean - prev) + bg.volatility * z;
            self.walk.push(next.clamp(0.0, bg.max));
        }
        self.walk[t]
    }

    /// Context reported before round `t`.
    pub fn sample_context(&mut self, t: usize) -> Result<ContextVector, DeviceError> {
        if !self.is_alive() {
            return Err(DeviceError::Unavailable(self.profile.id.to_string()));
        }
        let load = self.background_load(t);
        let p = &self.profile;
        let available_ram = p.total_ram * p.idle_free_ram * (1.0 - p.ram_pressure * load);
        let ctx = ContextVector {
            total_ram: p.total_ram,
            available_ram,
            battery: self.battery,
            battery_status: if self.charging {
                BatteryStatus::Charging
            } else {
                BatteryStatus::Discharging
            },
            cpu_usage: p.idle_cpu + (p.busy_cpu - p.idle_cpu) * load,
            perf_index: p.perf_index,
        };
        self.current = Some(ctx);
        Ok(ctx)
    }

    /// Noise-free cost under `ctx`.
    pub fn expected_cost(&self, ctx: &ContextVector) -> CostSample {
        expected_cost(&self.profile, ctx)
    }

    /// Cost under `ctx` with multiplicative log-normal time noise.
    pub fn true_cost(&mut self, ctx: &ContextVector) -> CostSample {
        let mut cost = self.expected_cost(ctx);
        if self.profile.noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.cost_rng);
            cost.batch_time *= (self.profile.noise_sigma * z).exp();
        }
        cost
    }

    /// Runs `batches` training batches under the most recently sampled
    /// context, re-evaluating the cost as the battery level changes.
    pub fn step_training(&mut self, batches: usize) -> TrainingRun {
        let mut run = TrainingRun {
            batches_requested: batches,
            batches_completed: 0,
            elapsed: 0.0,
            battery: self.battery,
            died: false,
            mean_cost: None,
        };
        if batches == 0 {
            return run;
        }
        let mut ctx = self.current.unwrap_or_else(|| ContextVector {
            total_ram: self.profile.total_ram,
            available_ram: self.profile.total_ram * self.profile.idle_free_ram,
            battery: self.battery,
            battery_status: BatteryStatus::Discharging,
            cpu_usage: self.profile.idle_cpu,
            perf_index: self.profile.perf_index,
        });
        let (mut sum_time, mut sum_drop) = (0.0, 0.0);
        for _ in 0..batches {
            if self.battery <= 0.0 {
                run.died = true;
                break;
            }
            ctx.battery = self.battery;
            let cost = self.true_cost(&ctx);
            if cost.battery_drop > 0.0 && cost.battery_drop >= self.battery {
                run.elapsed += cost.batch_time * (self.battery / cost.battery_drop);
                self.battery = 0.0;
                run.died = true;
                break;
            }
            self.battery = (self.battery - cost.battery_drop).clamp(0.0, 100.0);
            run.elapsed += cost.batch_time;
            run.batches_completed += 1;
            sum_time += cost.batch_time;
            sum_drop += cost.battery_drop;
        }
        run.battery = self.battery;
        if run.batches_completed > 0 {
            let n = run.batches_completed as f64;
            run.mean_cost = Some(CostSample {
                batch_time: sum_time / n,
                battery_drop: sum_drop / n,
            });
        }
        run
    }

    /// Advances the charging schedule by one idle period between rounds.
    pub fn idle(&mut self) {
        match self.profile.charging {
            ChargingSchedule::Never => {}
            ChargingSchedule::Always { recharge_per_round } => {
                self.battery = (self.battery + recharge_per_round).min(100.0);
            }
            ChargingSchedule::Cycle {
                plug_in_below,
                unplug_at,
                recharge_per_round,
            } => {
                if self.charging {
                    self.battery = (self.battery + recharge_per_round).min(100.0);
                    if self.battery >= unplug_at {
                        self.charging = false;
                    }
                } else if self.battery < plug_in_below {
                    self.charging = true;
                }
            }
        }
    }
}

/// Ground-truth multiplicative cost model.
pub fn expected_cost(p: &DeviceProfile, ctx: &ContextVector) -> CostSample {
    let frac = if ctx.total_ram > 0.0 {
        ctx.available_ram / ctx.total_ram
    } else {
        0.0
    };
    let batch_time = p.base_batch_time
        * p.age_factor
        * p.ram_factor(frac)
        * p.battery_factor(ctx.battery)
        * p.cpu_factor(ctx.cpu_usage);
    let battery_drop =
        p.base_battery_drop * p.age_factor * (1.0 - ctx.battery_status.as_f64() * p.charging_offset);
    CostSample {
        batch_time,
        battery_drop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::profile::BackgroundLoad;

    fn quiet(profile: DeviceProfile) -> DeviceProfile {
        DeviceProfile {
            noise_sigma: 0.0,
            ..profile
        }
    }

    fn ideal_ctx(p: &DeviceProfile) -> ContextVector {
        ContextVector {
            total_ram: p.total_ram,
            available_ram: p.total_ram,
            battery: 100.0,
            battery_status: BatteryStatus::Discharging,
            cpu_usage: 0.0,
            perf_index: p.perf_index,
        }
    }

    #[test]
    fn ideal_conditions_give_base_time() {
        let p = quiet(DeviceProfile::default());
        let mut d = SimDevice::new(p.clone(), 1).unwrap();
        let c = d.true_cost(&ideal_ctx(&p));
        assert_eq!(c.batch_time, p.base_batch_time);
        assert_eq!(c.battery_drop, p.base_battery_drop);
    }

    #[test]
    fn low_battery_slows_training_by_the_penalty() {
        let p = quiet(DeviceProfile {
            base_batch_time: 430.0,
            low_battery_penalty: 2.4,
            ..Default::default()
        });
        let mut hi = ideal_ctx(&p);
        hi.battery = 80.0;
        let mut lo = hi;
        lo.battery = 15.0;
        let ratio = expected_cost(&p, &lo).batch_time / expected_cost(&p, &hi).batch_time;
        assert!((ratio - 2.4).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn less_ram_is_slower() {
        let p = quiet(DeviceProfile::default());
        let mut c = ideal_ctx(&p);
        let mut prev = expected_cost(&p, &c).batch_time;
        for _ in 0..6 {
            c.available_ram /= 2.0;
            let t = expected_cost(&p, &c).batch_time;
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn idle_device_context() {
        let p = DeviceProfile {
            total_ram: 6.0,
            initial_battery: 80.0,
            background: BackgroundLoad::idle(),
            ..Default::default()
        };
        let mut d = SimDevice::new(p, 3).unwrap();
        let c = d.sample_context(0).unwrap();
        assert!((c.available_ram - 3.6).abs() < 1e-12);
        assert_eq!(c.battery, 80.0);
        assert_eq!(c.cpu_usage, 8.0);
        assert_eq!(c.battery_status, BatteryStatus::Discharging);
    }

    #[test]
    fn contexts_depend_only_on_seed_and_round() {
        let p = DeviceProfile::default();
        let mut a = SimDevice::new(p.clone(), 11).unwrap();
        let mut b = SimDevice::new(p, 11).unwrap();
        let late = a.sample_context(7).unwrap();
        for t in 0..7 {
            b.sample_context(t).unwrap();
        }
        assert_eq!(b.sample_context(7).unwrap(), late);
    }

    #[test]
    fn dead_device_is_unavailable() {
        let p = DeviceProfile {
            initial_battery: 0.0,
            ..Default::default()
        };
        let mut d = SimDevice::new(p, 0).unwrap();
        assert!(matches!(
            d.sample_context(0),
            Err(DeviceError::Unavailable(_))
        ));
    }

    #[test]
    fn zero_batches_change_nothing() {
        let mut d = SimDevice::new(DeviceProfile::default(), 0).unwrap();
        d.sample_context(0).unwrap();
        let run = d.step_training(0);
        assert_eq!(run.elapsed, 0.0);
        assert_eq!(run.battery, 100.0);
        assert!(!run.died);
    }

    #[test]
    fn drain_schedule_dies_after_two_batches() {
        let p = quiet(DeviceProfile {
            base_battery_drop: 2.0,
            initial_battery: 5.0,
            background: BackgroundLoad::idle(),
            ..Default::default()
        });
        let mut d = SimDevice::new(p, 0).unwrap();
        d.sample_context(0).unwrap();
        let run = d.step_training(10);
        assert!(run.died);
        assert_eq!(run.batches_completed, 2);
        assert_eq!(run.battery, 0.0);
        let bt = run.mean_cost.unwrap().batch_time;
        assert!(run.elapsed > 2.0 * bt && run.elapsed < 3.0 * bt * 2.0);
    }

    #[test]
    fn charging_with_full_offset_never_drains() {
        let p = DeviceProfile {
            charging: ChargingSchedule::Always {
                recharge_per_round: 0.0,
            },
            charging_offset: 1.0,
            initial_battery: 50.0,
            ..Default::default()
        };
        let mut d = SimDevice::new(p, 0).unwrap();
        let c = d.sample_context(0).unwrap();
        assert_eq!(c.battery_status, BatteryStatus::Charging);
        let run = d.step_training(20);
        assert!(run.battery >= 50.0);
    }

    #[test]
    fn cycle_schedule_plugs_and_unplugs() {
        let p = DeviceProfile {
            charging: ChargingSchedule::Cycle {
                plug_in_below: 30.0,
                unplug_at: 90.0,
                recharge_per_round: 40.0,
            },
            initial_battery: 25.0,
            ..Default::default()
        };
        let mut d = SimDevice::new(p, 0).unwrap();
        assert!(d.is_charging());
        d.idle();
        assert_eq!(d.battery(), 65.0);
        d.idle();
        assert_eq!(d.battery(), 100.0);
        assert!(!d.is_charging());
    }
}
