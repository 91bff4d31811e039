//! Server-side weight aggregation over flat weight vectors.
//!
//! Both strategies sum in `f64` in ascending client-id order and cast the
//! result back to `f32`, so the output does not depend on arrival order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::ClientId;
use crate::model::FlatWeights;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("client {client}: {actual} weights, expected {expected}")]
    LengthMismatch {
        client: String,
        expected: usize,
        actual: usize,
    },
    #[error("total sample count is zero")]
    ZeroSamples,
    #[error("client {0}: error rate is not a number")]
    InvalidErrorRate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    pub weights: FlatWeights,
    /// Validation error rate in `[0, 1]`.
    pub wer: f64,
    pub n_samples: usize,
    /// Observed seconds per batch.
    pub batch_time: f64,
    /// Observed battery percent per batch.
    pub battery_drop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AggregationStrategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[default]
    #[serde(rename = "wer_softmax")]
    WerSoftmax,
}

impl AggregationStrategy {
    pub fn name(self) -> &'static str {
        match self {
            AggregationStrategy::FedAvg => "fedavg",
            AggregationStrategy::WerSoftmax => "wer_softmax",
        }
    }

    /// Mixing coefficients in ascending client-id order.
    pub fn coefficients(self, updates: &[ClientUpdate]) -> Result<Vec<(ClientId, f64)>, AggregationError> {
        let sorted = sorted(updates)?;
        let coef = match self {
            AggregationStrategy::FedAvg => sample_fractions(&sorted)?,
            AggregationStrategy::WerSoftmax => {
                let wers: Vec<f64> = sorted.iter().map(|u| u.wer).collect();
                softmax_coefficients(&wers)?
            }
        };
        Ok(sorted
            .iter()
            .map(|u| u.client_id.clone())
            .zip(coef)
            .collect())
    }

    pub fn aggregate(self, updates: &[ClientUpdate]) -> Result<FlatWeights, AggregationError> {
        match self {
            AggregationStrategy::FedAvg => fed_avg(updates),
            AggregationStrategy::WerSoftmax => wer_weighted_aggregate(updates),
        }
    }
}

impl std::str::FromStr for AggregationStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fedavg" => Ok(AggregationStrategy::FedAvg),
            "wer_softmax" => Ok(AggregationStrategy::WerSoftmax),
            other => Err(format!("unknown aggregation strategy {other:?}")),
        }
    }
}

/// `exp(1 - wer_i) / sum_j exp(1 - wer_j)`, error rates clamped to `[0, 1]`.
pub fn softmax_coefficients(wers: &[f64]) -> Result<Vec<f64>, AggregationError> {
    if wers.is_empty() {
        return Err(AggregationError::Empty);
    }
    if let Some(i) = wers.iter().position(|w| w.is_nan()) {
        return Err(AggregationError::InvalidErrorRate(format!("#{i}")));
    }
    let logits: Vec<f64> = wers.iter().map(|w| 1.0 - w.clamp(0.0, 1.0)).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>, AggregationError> {
    let first = updates.first().ok_or(AggregationError::Empty)?;
    let len = first.weights.len();
    for u in updates {
        if u.weights.len() != len {
            return Err(AggregationError::LengthMismatch {
                client: u.client_id.to_string(),
                expected: len,
                actual: u.weights.len(),
            });
        }
        if u.wer.is_nan() {
            return Err(AggregationError::InvalidErrorRate(u.client_id.to_string()));
        }
    }
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    v.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    Ok(v)
}

fn sample_fractions(sorted: &[&ClientUpdate]) -> Result<Vec<f64>, AggregationError> {
    let total: usize = sorted.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(AggregationError::ZeroSamples);
    }
    Ok(sorted
        .iter()
        .map(|u| u.n_samples as f64 / total as f64)
        .collect())
}

fn combine(sorted: &[&ClientUpdate], coef: &[f64]) -> FlatWeights {
    let len = sorted[0].weights.len();
    let mut acc = vec![0.0f64; len];
    for (u, c) in sorted.iter().zip(coef) {
        for (a, w) in acc.iter_mut().zip(u.weights.as_slice()) {
            *a += c * f64::from(*w);
        }
    }
    FlatWeights(acc.into_iter().map(|v| v as f32).collect())
}

/// Convex combination weighted by the softmax of `1 - wer`.
pub fn wer_weighted_aggregate(updates: &[ClientUpdate]) -> Result<FlatWeights, AggregationError> {
    let sorted = sorted(updates)?;
    let wers: Vec<f64> = sorted.iter().map(|u| u.wer).collect();
    let coef = softmax_coefficients(&wers)?;
    Ok(combine(&sorted, &coef))
}

/// Sample-count-weighted mean.
pub fn fed_avg(updates: &[ClientUpdate]) -> Result<FlatWeights, AggregationError> {
    let sorted = sorted(updates)?;
    let coef = sample_fractions(&sorted)?;
    Ok(combine(&sorted, &coef))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(id: &str, w: Vec<f32>, wer: f64, n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: ClientId::new(id),
            weights: FlatWeights(w),
            wer,
            n_samples: n,
            batch_time: 1.0,
            battery_drop: 1.0,
        }
    }

    #[test]
    fn equal_errors_give_uniform_coefficients() {
        let c = softmax_coefficients(&[0.4, 0.4, 0.4, 0.4]).unwrap();
        for v in c {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert_eq!(softmax_coefficients(&[0.9]).unwrap(), vec![1.0]);
        assert_eq!(softmax_coefficients(&[]), Err(AggregationError::Empty));
    }

    #[test]
    fn equal_error_mean() {
        let out = wer_weighted_aggregate(&[
            upd("a", vec![0.0, 0.0], 0.3, 25),
            upd("b", vec![2.0, 4.0], 0.3, 25),
        ])
        .unwrap();
        assert_eq!(out.0, vec![1.0, 2.0]);
    }

    #[test]
    fn fedavg_weights_by_samples() {
        let out = fed_avg(&[upd("a", vec![4.0], 0.0, 25), upd("b", vec![0.0], 0.0, 75)]).unwrap();
        assert_eq!(out.0, vec![1.0]);
        let single = fed_avg(&[upd("a", vec![3.5, -1.0], 0.0, 10)]).unwrap();
        assert_eq!(single.0, vec![3.5, -1.0]);
        assert_eq!(
            fed_avg(&[upd("a", vec![1.0], 0.0, 0)]),
            Err(AggregationError::ZeroSamples)
        );
    }

    #[test]
    fn length_mismatch_names_client() {
        let err = wer_weighted_aggregate(&[upd("a", vec![1.0], 0.1, 1), upd("b", vec![1.0, 2.0], 0.1, 1)])
            .unwrap_err();
        assert_eq!(
            err,
            AggregationError::LengthMismatch {
                client: "b".into(),
                expected: 1,
                actual: 2
            }
        );
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in [AggregationStrategy::FedAvg, AggregationStrategy::WerSoftmax] {
            assert_eq!(s.name().parse::<AggregationStrategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }
}
