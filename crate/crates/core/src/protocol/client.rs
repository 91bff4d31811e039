//! Client-side round logic: a simulated device with its local data.

use std::collections::BTreeMap;

use log::error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::message::{ContextReport, UpdateMeta, UploadedUpdate};
use super::ProtocolError;
use crate::device::{
    ClientId, ContextVector, CostSample, DeviceError, DeviceProfile, SimDevice, TrainingRun,
};
use crate::model::{
    evaluate, flatten_weights, train_local, LocalDataset, LocalTrainConfig, MixtureTask,
    ModelWeights,
};
use crate::seeding::{derive_seed, hash_str};

const DATA_STREAM: u64 = 0xda7a;
const TRAIN_STREAM: u64 = 0x7a1;

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub run: TrainingRun,
    pub battery_before: f64,
    /// `None` when the device died before finishing.
    pub update: Option<UploadedUpdate>,
}

/// What happened on the device in one round, for reporting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeTrace {
    pub context: Option<ContextVector>,
    /// Noise-free cost under `context`.
    pub expected: Option<CostSample>,
    pub battery_before: f64,
    pub run: Option<TrainingRun>,
}

#[derive(Debug, Clone)]
pub struct ClientNode {
    device: SimDevice,
    trace: BTreeMap<usize, NodeTrace>,
    data: LocalDataset,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
}

impl ClientNode {
    pub fn new(
        profile: DeviceProfile,
        task: &MixtureTask,
        experiment_seed: u64,
        batch_size: usize,
        learning_rate: f32,
    ) -> Result<Self, DeviceError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            experiment_seed,
            &[DATA_STREAM, hash_str(profile.id.as_str())],
        ));
        let data = task.client_dataset(profile.dialect, profile.n_train, profile.n_val, &mut rng);
        Ok(Self {
            device: SimDevice::new(profile, experiment_seed)?,
            trace: BTreeMap::new(),
            data,
            batch_size,
            learning_rate,
            seed: experiment_seed,
        })
    }

    pub fn id(&self) -> &ClientId {
        self.device.id()
    }

    pub fn device(&self) -> &SimDevice {
        &self.device
    }

    pub fn device_mut(&mut self) -> &mut SimDevice {
        &mut self.device
    }

    pub fn dataset(&self) -> &LocalDataset {
        &self.data
    }

    pub fn trace(&self, round: usize) -> Option<&NodeTrace> {
        self.trace.get(&round)
    }

    pub fn report(&mut self, round: usize) -> ContextReport {
        let battery_before = self.device.battery();
        let sampled = self.device.sample_context(round);
        let entry = self.trace.entry(round).or_default();
        entry.battery_before = battery_before;
        match sampled {
            Ok(context) => {
                entry.context = Some(context);
                entry.expected = Some(self.device.expected_cost(&context));
                ContextReport::Context {
                    context,
                    n_samples: self.data.n_train(),
                }
            }
            Err(e) => ContextReport::Unavailable {
                reason: e.to_string(),
            },
        }
    }

    /// Trains `epochs` passes from `global`; the device may die part-way,
    /// in which case nothing is uploaded.
    pub fn train(
        &mut self,
        round: usize,
        global: &ModelWeights,
        epochs: usize,
    ) -> Result<TrainResult, ProtocolError> {
        if epochs == 0 {
            error!("{}: selected with zero epochs in round {round}", self.id());
            return Err(ProtocolError::Session(format!(
                "{} selected with zero epochs",
                self.id()
            )));
        }
        let battery_before = self.device.battery();
        let per_epoch = self.data.n_train() / self.batch_size;
        let run = self.device.step_training(epochs * per_epoch);
        let entry = self.trace.entry(round).or_default();
        entry.battery_before = battery_before;
        entry.run = Some(run);
        if run.died {
            return Ok(TrainResult {
                run,
                battery_before,
                update: None,
            });
        }
        let cfg = LocalTrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: derive_seed(self.seed, &[TRAIN_STREAM, hash_str(self.id().as_str()), round as u64]),
        };
        let err = |e: crate::model::ModelError| ProtocolError::Session(e.to_string());
        let (weights, _) = train_local(global, &self.data, epochs, &cfg).map_err(err)?;
        let wer = evaluate(&weights, &self.data).map_err(err)?;
        let cost = run.mean_cost;
        let meta = UpdateMeta {
            wer,
            n_samples: self.data.n_train(),
            batch_time: cost.map_or(0.0, |c| c.batch_time),
            battery_drop: cost.map_or(0.0, |c| c.battery_drop),
            batches_completed: run.batches_completed,
            epochs_completed: epochs,
            elapsed: run.elapsed,
        };
        Ok(TrainResult {
            run,
            battery_before,
            update: Some(UploadedUpdate {
                meta,
                weights: flatten_weights(&weights).map_err(err)?,
            }),
        })
    }

    /// Idle period between rounds (charging).
    pub fn end_round(&mut self) {
        self.device.idle();
    }
}
