//! Neural UCB estimator: a rectifier network predicting normalised
//! `[batch_time, battery_drop]`, a gradient-feature confidence matrix and
//! the log of everything it was trained on.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::confidence::ConfidenceState;
use super::mlp::Mlp;
use super::{CostEstimate, EstimatorError, ObservationLog, TargetScale, UcbScore};
use crate::device::ClientId;
use crate::model::{ModelWeights, TensorSpec};

/// Fresh initialisations tried when a refit leaves the network silent.
const MAX_REDRAWS: usize = 8;

/// Gradient-descent refit schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Logs longer than this are refit on a fresh random subset of this
    /// size at every step; `None` always uses the whole log.
    pub max_batch: Option<usize>,
    /// Rescales any step gradient longer than this. The `sqrt(m)` output
    /// multiplier makes unclipped steps overshoot and can silence every
    /// rectifier for good.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 1e-2,
            max_batch: Some(64),
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralConfig {
    /// Hidden layer widths; the first one is the `m` of the output
    /// multiplier and of the exploration bonus.
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub alpha: f64,
    pub train: TrainConfig,
    pub scale: TargetScale,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            lambda: 1.0,
            alpha: 0.01,
            train: TrainConfig::default(),
            scale: TargetScale::default(),
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let mut bad = Vec::new();
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            bad.push("hidden");
        }
        if !(self.lambda > 0.0) {
            bad.push("lambda");
        }
        if !(self.alpha >= 0.0) {
            bad.push("alpha");
        }
        if !(self.train.learning_rate >= 0.0) {
            bad.push("train.learning_rate");
        }
        if self.train.max_batch == Some(0) {
            bad.push("train.max_batch");
        }
        if self.train.max_grad_norm.is_some_and(|c| !(c > 0.0)) {
            bad.push("train.max_grad_norm");
        }
        if !(self.scale.batch_time > 0.0 && self.scale.battery_drop > 0.0) {
            bad.push("scale");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(EstimatorError::Config(format!("invalid fields {bad:?}")))
        }
    }

    fn sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend(&self.hidden);
        sizes.push(2);
        sizes
    }
}

#[derive(Debug, Clone)]
pub struct NeuralUcb {
    net: Mlp,
    confidence: ConfidenceState,
    log: ObservationLog,
    cfg: NeuralConfig,
    rng: ChaCha8Rng,
    stale: bool,
}

impl NeuralUcb {
    pub fn new(input_dim: usize, cfg: &NeuralConfig, seed: u64) -> Result<Self, EstimatorError> {
        cfg.validate()?;
        let sizes = cfg.sizes(input_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::random(&sizes, cfg.hidden[0], &mut rng)?;
        let confidence = ConfidenceState::new(net.param_count(), cfg.lambda)?;
        Ok(Self {
            net,
            confidence,
            log: ObservationLog::new(),
            cfg: cfg.clone(),
            rng,
            stale: false,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn confidence(&self) -> &ConfidenceState {
        &self.confidence
    }

    pub fn log(&self) -> &ObservationLog {
        &self.log
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// True when observations arrived since the last refit.
    pub fn is_stale(&self) -> bool {
        self.stale
    }

    fn width(&self) -> f64 {
        self.net.width() as f64
    }

    /// Normalised network outputs before clamping.
    pub fn raw_output(&self, x: &[f64]) -> Result<Vec<f64>, EstimatorError> {
        self.net.forward(x)
    }

    pub fn predict(&self, x: &[f64]) -> Result<CostEstimate, EstimatorError> {
        Ok(self.cfg.scale.denormalise(&self.raw_output(x)?).clamped())
    }

    /// `sqrt(g^T Z^{-1} g / m)` for the batch-time gradient, normalised units.
    pub fn uncertainty(&self, x: &[f64]) -> Result<f64, EstimatorError> {
        let g = self.net.gradient(x, 0)?;
        Ok((self.confidence.quad_form(&g)? / self.width()).sqrt())
    }

    /// `-time_hat + alpha * sqrt(g^T Z^{-1} g / m)`, in seconds.
    pub fn score(&self, x: &[f64], alpha: f64) -> Result<UcbScore, EstimatorError> {
        let est = self.predict(x)?;
        let bonus = if alpha == 0.0 {
            0.0
        } else {
            alpha * self.cfg.scale.batch_time * self.uncertainty(x)?
        };
        Ok(UcbScore::new(-est.batch_time, bonus))
    }

    /// Folds the observation into the confidence matrix (gradient taken at
    /// the current parameters) and appends it to the log. Does not refit.
    pub fn observe(
        &mut self,
        round: usize,
        client: ClientId,
        x: &[f64],
        cost: CostEstimate,
    ) -> Result<(), EstimatorError> {
        let g = self.net.gradient(x, 0)?;
        self.confidence.update(&g, self.width())?;
        self.log.append(round, client, x.to_vec(), cost)?;
        self.stale = true;
        Ok(())
    }

    fn training_set(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let xs = self.log.records().iter().map(|r| r.features.clone()).collect();
        let ys = self
            .log
            .records()
            .iter()
            .map(|r| self.cfg.scale.normalise(r.cost).to_vec())
            .collect();
        (xs, ys)
    }

    /// Warm-started gradient descent on the squared error over the log.
    pub fn fit(&mut self) {
        self.fit_inner(false);
    }

    /// Like [`NeuralUcb::fit`], returning the full-log loss before the first
    /// step and after every step.
    pub fn fit_traced(&mut self) -> Vec<f64> {
        self.fit_inner(true)
    }

    fn fit_inner(&mut self, trace: bool) -> Vec<f64> {
        self.stale = false;
        if self.log.is_empty() {
            return Vec::new();
        }
        let (xs, ys) = self.training_set();
        let mut losses = self.descend(&xs, &ys, trace);
        // A bias-free rectifier net fed non-negative inputs can descend into
        // the all-silent point (output 0, gradient 0) and never leave it.
        // Redraw the weights when that happens.
        let mut redraws = 0;
        while self.cfg.train.learning_rate != 0.0 && redraws < MAX_REDRAWS && self.is_silent(&xs) {
            redraws += 1;
            let sizes = self.cfg.sizes(self.input_dim());
            self.net = Mlp::random(&sizes, self.cfg.hidden[0], &mut self.rng).expect("validated sizes");
            losses = self.descend(&xs, &ys, trace);
        }
        losses
    }

    /// True when no logged input reaches the output through a live unit.
    fn is_silent(&self, xs: &[Vec<f64>]) -> bool {
        xs.iter().all(|x| {
            self.net
                .gradient(x, 0)
                .map_or(true, |g| g.iter().all(|v| *v == 0.0))
        })
    }

    fn descend(&mut self, xs: &[Vec<f64>], ys: &[Vec<f64>], trace: bool) -> Vec<f64> {
        let mut losses = Vec::new();
        let n = xs.len();
        let lr = self.cfg.train.learning_rate;
        let batch = self.cfg.train.max_batch.unwrap_or(n).min(n);
        if trace {
            losses.push(self.net.loss(xs, ys));
        }
        let mut grad = vec![0.0; self.net.param_count()];
        let (mut bx, mut by) = (Vec::with_capacity(batch), Vec::with_capacity(batch));
        for _ in 0..self.cfg.train.steps {
            if batch < n {
                bx.clear();
                by.clear();
                for i in sample(&mut self.rng, n, batch) {
                    bx.push(xs[i].clone());
                    by.push(ys[i].clone());
                }
                self.net.loss_gradient(&bx, &by, &mut grad);
            } else {
                self.net.loss_gradient(xs, ys, &mut grad);
            }
            if let Some(cap) = self.cfg.train.max_grad_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cap {
                    grad.iter_mut().for_each(|g| *g *= cap / norm);
                }
            }
            if lr != 0.0 {
                for (t, g) in self.net.theta_mut().iter_mut().zip(&grad) {
                    *t -= lr * g;
                }
            }
            if trace {
                losses.push(self.net.loss(xs, ys));
            }
        }
        losses
    }

    /// Network and confidence matrix as named f32 tensors.
    pub fn snapshot(&self) -> Result<ModelWeights, EstimatorError> {
        let err = |e: crate::model::ModelError| EstimatorError::Snapshot(e.to_string());
        let mut w = ModelWeights::empty();
        let sizes = self.net.sizes();
        for l in 0..self.net.layer_count() {
            w.push(
                TensorSpec::new(format!("mlp/layer_{l}"), vec![sizes[l + 1], sizes[l]]),
                self.net.layer(l).iter().map(|&v| v as f32).collect(),
            )
            .map_err(err)?;
        }
        let p = self.confidence.dim();
        w.push(
            TensorSpec::new("confidence/z_inverse", vec![p, p]),
            self.confidence.z_inverse().iter().map(|&v| v as f32).collect(),
        )
        .map_err(err)?;
        Ok(w)
    }

    /// Replaces network and confidence matrix from a [`NeuralUcb::snapshot`].
    pub fn restore(&mut self, w: &ModelWeights) -> Result<(), EstimatorError> {
        for l in 0..self.net.layer_count() {
            let name = format!("mlp/layer_{l}");
            let t = w
                .tensor(&name)
                .ok_or_else(|| EstimatorError::Snapshot(format!("missing {name}")))?;
            let dst = self.net.layer_mut(l);
            if t.len() != dst.len() {
                return Err(EstimatorError::Dimension {
                    expected: dst.len(),
                    actual: t.len(),
                });
            }
            for (d, s) in dst.iter_mut().zip(t) {
                *d = f64::from(*s);
            }
        }
        let z = w
            .tensor("confidence/z_inverse")
            .ok_or_else(|| EstimatorError::Snapshot("missing confidence/z_inverse".into()))?;
        self.confidence = ConfidenceState::from_inverse(
            self.confidence.dim(),
            self.confidence.lambda(),
            z.iter().map(|&v| f64::from(v)).collect(),
            self.confidence.update_count(),
        )?;
        Ok(())
    }
}
