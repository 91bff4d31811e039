//! Seeded generators shared by the integration suites.
#![allow(dead_code)]

use fedsel::device::{BatteryStatus, ClientId, ContextVector};
use fedsel::model::{FlatWeights, ModelWeights, TensorSpec};
use fedsel::protocol::{ContextReport, Directive, RoundStatus, RpcMessage, UpdateMeta, UploadedUpdate};
use rand::Rng;

pub fn random_model<R: Rng>(rng: &mut R) -> ModelWeights {
    let tensors = rng.random_range(0..6);
    let entries = (0..tensors)
        .map(|i| {
            let rank = rng.random_range(1..4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..6)).collect();
            let n: usize = shape.iter().product();
            // Raw bit patterns cover NaN payloads, infinities and subnormals.
            let values = (0..n).map(|_| f32::from_bits(rng.random())).collect();
            (TensorSpec::new(format!("block{i}/kernel"), shape), values)
        })
        .collect();
    ModelWeights::new(entries).expect("generated manifest is valid")
}

fn weights<R: Rng>(rng: &mut R) -> FlatWeights {
    let n = rng.random_range(0..40);
    FlatWeights((0..n).map(|_| f32::from_bits(rng.random())).collect())
}

fn text<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(0..12);
    (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => rng.random_range('a'..='z'),
            1 => rng.random_range('0'..='9'),
            2 => ['-', '_', ' ', '"', '\\', '\n'][rng.random_range(0..6)],
            _ => ['é', 'ß', '中', '🙂'][rng.random_range(0..4)],
        })
        .collect()
}

fn finite<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..4) {
        0 => 0.0,
        1 => rng.random_range(-1e6..1e6),
        2 => rng.random::<f64>() * 1e-300,
        _ => {
            let v = f64::from_bits(rng.random());
            if v.is_finite() {
                v
            } else {
                1.0
            }
        }
    }
}

fn context<R: Rng>(rng: &mut R) -> ContextVector {
    let tr = rng.random_range(0.5..16.0);
    ContextVector {
        total_ram: tr,
        available_ram: rng.random_range(0.0..tr),
        battery: rng.random_range(0.0..=100.0),
        battery_status: if rng.random() {
            BatteryStatus::Charging
        } else {
            BatteryStatus::Discharging
        },
        cpu_usage: rng.random_range(0.0..=100.0),
        perf_index: rng.random_range(1.0..1e6),
    }
}

fn meta<R: Rng>(rng: &mut R) -> UpdateMeta {
    UpdateMeta {
        wer: finite(rng),
        n_samples: rng.random_range(0..1000),
        batch_time: finite(rng),
        battery_drop: finite(rng),
        batches_completed: rng.random_range(0..100),
        epochs_completed: rng.random_range(0..10),
        elapsed: finite(rng),
    }
}

pub fn random_message<R: Rng>(rng: &mut R) -> RpcMessage {
    let client_id = ClientId::new(text(rng));
    let round = rng.random();
    match rng.random_range(0..7) {
        0 => RpcMessage::CommunicatedTextReq {
            client_id,
            round,
            report: if rng.random() {
                ContextReport::Context {
                    context: context(rng),
                    n_samples: rng.random_range(0..1000),
                }
            } else {
                ContextReport::Unavailable { reason: text(rng) }
            },
        },
        1 => RpcMessage::CommunicatedTextResp {
            client_id,
            round,
            directive: match rng.random_range(0..5) {
                0 => Directive::Pending,
                1 => Directive::Wait,
                2 => Directive::Selected {
                    epochs: rng.random_range(0..50),
                },
                3 => Directive::RoundSkipped,
                _ => Directive::Finished,
            },
        },
        2 => RpcMessage::GetGlobalWeightsReq { client_id, round },
        3 => RpcMessage::GetGlobalWeightsResp {
            client_id,
            round,
            manifest: random_model(rng).manifest().to_vec(),
            weights: weights(rng),
        },
        4 => RpcMessage::GetFLWeightsReq {
            client_id,
            round,
            update: rng.random::<bool>().then(|| UploadedUpdate {
                meta: meta(rng),
                weights: weights(rng),
            }),
        },
        5 => RpcMessage::GetFLWeightsResp {
            client_id,
            round,
            status: [RoundStatus::Pending, RoundStatus::Aggregated, RoundStatus::Voided][rng.random_range(0..3)],
            weights: weights(rng),
        },
        _ => RpcMessage::Error {
            client_id,
            round,
            message: text(rng),
        },
    }
}

/// Mostly-garbage byte strings, some starting with a plausible frame header.
pub fn fuzz_bytes<R: Rng>(rng: &mut R) -> Vec<u8> {
    let n = rng.random_range(0..64);
    let mut b: Vec<u8> = (0..n).map(|_| rng.random()).collect();
    if rng.random_bool(0.5) && b.len() >= 5 {
        let len = (b.len() - 4) as u32;
        b[..4].copy_from_slice(&len.to_be_bytes());
        b[4] = rng.random_range(0..9);
    }
    b
}
