//! One entry point over the estimator variants used by the orchestrator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::linucb::LinUcb;
use super::neural::{NeuralConfig, NeuralUcb};
use super::{CostEstimate, EstimatorError, UcbScore};
use crate::device::{ClientId, ContextVector, FeatureSet};
use crate::seeding::{derive_seed, hash_str};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "linucb")]
    LinUcb,
    /// One network shared by every client, fed the full context.
    #[serde(rename = "neuralucb_s")]
    NeuralShared,
    /// One network per client, fed the device-state features.
    #[serde(rename = "neuralucb_m")]
    NeuralPerClient,
    /// Fixed per-client estimates, never updated.
    #[serde(rename = "frozen")]
    Frozen,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::LinUcb => "linucb",
            EstimatorKind::NeuralShared => "neuralucb_s",
            EstimatorKind::NeuralPerClient => "neuralucb_m",
            EstimatorKind::Frozen => "frozen",
        }
    }

    pub fn features(self) -> FeatureSet {
        match self {
            EstimatorKind::NeuralPerClient => FeatureSet::Personal,
            _ => FeatureSet::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankConfig {
    pub neural: NeuralConfig,
    pub linucb_alpha: f64,
    pub linucb_lambda: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            neural: NeuralConfig::default(),
            linucb_alpha: 10.0,
            linucb_lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Linear(LinUcb),
    Shared(NeuralUcb),
    PerClient(BTreeMap<ClientId, NeuralUcb>),
    Frozen(BTreeMap<ClientId, CostEstimate>),
}

#[derive(Debug, Clone)]
pub struct EstimatorBank {
    kind: EstimatorKind,
    alpha: f64,
    inner: Inner,
    clients: Vec<ClientId>,
}

impl EstimatorBank {
    pub fn new(
        kind: EstimatorKind,
        clients: &[ClientId],
        cfg: &BankConfig,
        seed: u64,
    ) -> Result<Self, EstimatorError> {
        let dim = kind.features().dim();
        let (inner, alpha) = match kind {
            EstimatorKind::LinUcb => (
                Inner::Linear(LinUcb::new(dim, cfg.linucb_lambda, cfg.neural.scale)?),
                cfg.linucb_alpha,
            ),
            EstimatorKind::NeuralShared => (
                Inner::Shared(NeuralUcb::new(dim, &cfg.neural, derive_seed(seed, &[0]))?),
                cfg.neural.alpha,
            ),
            EstimatorKind::NeuralPerClient => {
                let mut models = BTreeMap::new();
                for id in clients {
                    let s = derive_seed(seed, &[1, hash_str(id.as_str())]);
                    models.insert(id.clone(), NeuralUcb::new(dim, &cfg.neural, s)?);
                }
                (Inner::PerClient(models), cfg.neural.alpha)
            }
            EstimatorKind::Frozen => {
                return Err(EstimatorError::Config(
                    "frozen estimators are built with EstimatorBank::frozen".into(),
                ))
            }
        };
        Ok(Self {
            kind,
            alpha,
            inner,
            clients: clients.to_vec(),
        })
    }

    pub fn frozen(estimates: BTreeMap<ClientId, CostEstimate>) -> Self {
        let clients = estimates.keys().cloned().collect();
        Self {
            kind: EstimatorKind::Frozen,
            alpha: 0.0,
            inner: Inner::Frozen(estimates),
            clients,
        }
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    pub fn clients(&self) -> &[ClientId] {
        &self.clients
    }

    /// Per-client network, when the bank holds one per client.
    pub fn per_client(&self, id: &ClientId) -> Option<&NeuralUcb> {
        match &self.inner {
            Inner::PerClient(m) => m.get(id),
            _ => None,
        }
    }

    pub fn shared(&self) -> Option<&NeuralUcb> {
        match &self.inner {
            Inner::Shared(n) => Some(n),
            _ => None,
        }
    }

    fn unknown(id: &ClientId) -> EstimatorError {
        EstimatorError::UnknownClient(id.to_string())
    }

    pub fn predict(&self, id: &ClientId, ctx: &ContextVector) -> Result<CostEstimate, EstimatorError> {
        let x = self.kind.features().extract(ctx);
        match &self.inner {
            Inner::Linear(l) => l.predict(&x),
            Inner::Shared(n) => n.predict(&x),
            Inner::PerClient(m) => m.get(id).ok_or_else(|| Self::unknown(id))?.predict(&x),
            Inner::Frozen(m) => m
                .get(id)
                .map(|c| c.clamped())
                .ok_or_else(|| Self::unknown(id)),
        }
    }

    pub fn score(&self, id: &ClientId, ctx: &ContextVector) -> Result<UcbScore, EstimatorError> {
        let x = self.kind.features().extract(ctx);
        match &self.inner {
            Inner::Linear(l) => l.score(&x, self.alpha),
            Inner::Shared(n) => n.score(&x, self.alpha),
            Inner::PerClient(m) => m
                .get(id)
                .ok_or_else(|| Self::unknown(id))?
                .score(&x, self.alpha),
            Inner::Frozen(m) => m
                .get(id)
                .map(|c| UcbScore::new(-c.clamped().batch_time, 0.0))
                .ok_or_else(|| Self::unknown(id)),
        }
    }

    /// Records one observed per-batch cost. Neural models refit only in
    /// [`EstimatorBank::end_round`].
    pub fn observe(
        &mut self,
        round: usize,
        id: &ClientId,
        ctx: &ContextVector,
        cost: CostEstimate,
    ) -> Result<(), EstimatorError> {
        let x = self.kind.features().extract(ctx);
        match &mut self.inner {
            Inner::Linear(l) => l.observe(&x, cost),
            Inner::Shared(n) => n.observe(round, id.clone(), &x, cost),
            Inner::PerClient(m) => m
                .get_mut(id)
                .ok_or_else(|| Self::unknown(id))?
                .observe(round, id.clone(), &x, cost),
            Inner::Frozen(m) => {
                if m.contains_key(id) {
                    Ok(())
                } else {
                    Err(Self::unknown(id))
                }
            }
        }
    }

    /// Refits every neural model that received observations this round.
    pub fn end_round(&mut self) {
        match &mut self.inner {
            Inner::Shared(n) if n.is_stale() => n.fit(),
            Inner::PerClient(m) => {
                for n in m.values_mut().filter(|n| n.is_stale()) {
                    n.fit();
                }
            }
            _ => {}
        }
    }
}
