//! Single-hidden-layer softmax classifier used as the client model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{LocalDataset, Samples};
use super::weights::{ModelWeights, TensorSpec};
use super::ModelError;

pub const HIDDEN_KERNEL: &str = "hidden/kernel";
pub const HIDDEN_BIAS: &str = "hidden/bias";
pub const LOGITS_KERNEL: &str = "logits/kernel";
pub const LOGITS_BIAS: &str = "logits/bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for SurrogateShape {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: 16,
            classes: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 5,
            seed: 0,
        }
    }
}

/// Glorot-style random initialisation with zero biases.
pub fn init_weights(shape: SurrogateShape, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |fan_in: usize, fan_out: usize| -> Vec<f32> {
        let std = (2.0 / (fan_in + fan_out) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect()
    };
    let hk = draw(shape.input_dim, shape.hidden);
    let lk = draw(shape.hidden, shape.classes);
    ModelWeights::new(vec![
        (
            TensorSpec::new(HIDDEN_KERNEL, vec![shape.input_dim, shape.hidden]),
            hk,
        ),
        (
            TensorSpec::new(HIDDEN_BIAS, vec![shape.hidden]),
            vec![0.0; shape.hidden],
        ),
        (
            TensorSpec::new(LOGITS_KERNEL, vec![shape.hidden, shape.classes]),
            lk,
        ),
        (
            TensorSpec::new(LOGITS_BIAS, vec![shape.classes]),
            vec![0.0; shape.classes],
        ),
    ])
    .expect("generated manifest is consistent")
}

/// Borrowed view of the four parameter tensors.
struct Params<'a> {
    shape: SurrogateShape,
    hk: &'a [f32],
    hb: &'a [f32],
    lk: &'a [f32],
    lb: &'a [f32],
}

fn infer_shape(w: &ModelWeights) -> Result<SurrogateShape, ModelError> {
    let find = |name: &str| {
        w.manifest()
            .iter()
            .find(|s| s.node_name == name)
            .ok_or_else(|| ModelError::Architecture(format!("missing node {name}")))
    };
    let hk = find(HIDDEN_KERNEL)?;
    let lk = find(LOGITS_KERNEL)?;
    let hb = find(HIDDEN_BIAS)?;
    let lb = find(LOGITS_BIAS)?;
    if hk.shape.len() != 2 || lk.shape.len() != 2 {
        return Err(ModelError::Architecture("kernels must be 2-D".into()));
    }
    let shape = SurrogateShape {
        input_dim: hk.shape[0],
        hidden: hk.shape[1],
        classes: lk.shape[1],
    };
    if lk.shape[0] != shape.hidden || hb.shape != [shape.hidden] || lb.shape != [shape.classes] {
        return Err(ModelError::Architecture("layer shapes do not chain".into()));
    }
    Ok(shape)
}

fn params(w: &ModelWeights) -> Result<Params<'_>, ModelError> {
    let shape = infer_shape(w)?;
    Ok(Params {
        shape,
        hk: w.tensor(HIDDEN_KERNEL).unwrap_or_default(),
        hb: w.tensor(HIDDEN_BIAS).unwrap_or_default(),
        lk: w.tensor(LOGITS_KERNEL).unwrap_or_default(),
        lb: w.tensor(LOGITS_BIAS).unwrap_or_default(),
    })
}

impl Params<'_> {
    fn forward(&self, x: &[f32], hidden: &mut [f32], probs: &mut [f32]) {
        let SurrogateShape {
            input_dim,
            hidden: h,
            classes,
        } = self.shape;
        for j in 0..h {
            let mut acc = self.hb[j];
            for i in 0..input_dim {
                acc += x[i] * self.hk[i * h + j];
            }
            hidden[j] = acc.max(0.0);
        }
        for c in 0..classes {
            let mut acc = self.lb[c];
            for j in 0..h {
                acc += hidden[j] * self.lk[j * classes + c];
            }
            probs[c] = acc;
        }
        let max = probs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
    }
}

fn check_input(shape: SurrogateShape, samples: &Samples) -> Result<(), ModelError> {
    if samples.dim() != shape.input_dim {
        return Err(ModelError::Architecture(format!(
            "model expects {} features, data has {}",
            shape.input_dim,
            samples.dim()
        )));
    }
    if let Some(&bad) = samples.labels().iter().find(|&&l| l >= shape.classes) {
        return Err(ModelError::Dataset(format!(
            "label {bad} out of range for {} classes",
            shape.classes
        )));
    }
    Ok(())
}

/// Mean cross-entropy of `w` over `samples`.
pub fn mean_loss(w: &ModelWeights, samples: &Samples) -> Result<f32, ModelError> {
    let p = params(w)?;
    check_input(p.shape, samples)?;
    if samples.is_empty() {
        return Err(ModelError::Dataset("no samples".into()));
    }
    let mut hidden = vec![0.0; p.shape.hidden];
    let mut probs = vec![0.0; p.shape.classes];
    let mut total = 0.0f64;
    for i in 0..samples.len() {
        p.forward(samples.row(i), &mut hidden, &mut probs);
        total -= (probs[samples.label(i)].max(1e-12) as f64).ln();
    }
    Ok((total / samples.len() as f64) as f32)
}

/// Most probable class for one feature row.
pub fn predict(w: &ModelWeights, x: &[f32]) -> Result<usize, ModelError> {
    let p = params(w)?;
    if x.len() != p.shape.input_dim {
        return Err(ModelError::Architecture("feature width mismatch".into()));
    }
    let mut hidden = vec![0.0; p.shape.hidden];
    let mut probs = vec![0.0; p.shape.classes];
    p.forward(x, &mut hidden, &mut probs);
    Ok(argmax(&probs))
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of misclassified rows in `samples`.
pub fn error_rate(w: &ModelWeights, samples: &Samples) -> Result<f64, ModelError> {
    let p = params(w)?;
    check_input(p.shape, samples)?;
    if samples.is_empty() {
        return Err(ModelError::Dataset("empty evaluation set".into()));
    }
    let mut hidden = vec![0.0; p.shape.hidden];
    let mut probs = vec![0.0; p.shape.classes];
    let wrong = (0..samples.len())
        .filter(|&i| {
            p.forward(samples.row(i), &mut hidden, &mut probs);
            argmax(&probs) != samples.label(i)
        })
        .count();
    Ok(wrong as f64 / samples.len() as f64)
}

/// Validation error rate, the client-side quality signal used for aggregation.
pub fn evaluate(w: &ModelWeights, data: &LocalDataset) -> Result<f64, ModelError> {
    if data.validation.is_empty() {
        return Err(ModelError::Dataset("empty validation split".into()));
    }
    error_rate(w, &data.validation)
}

/// Mini-batch gradient descent on cross-entropy.
///
/// Returns the updated weights and the full training-set loss measured after
/// every epoch. A trailing partial batch is dropped unless the whole set is
/// smaller than one batch.
pub fn train_local(
    w: &ModelWeights,
    data: &LocalDataset,
    epochs: usize,
    cfg: &LocalTrainConfig,
) -> Result<(ModelWeights, Vec<f32>), ModelError> {
    let train = &data.train;
    if train.is_empty() {
        return Err(ModelError::Dataset("empty training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Dataset("batch size must be at least 1".into()));
    }
    let shape = infer_shape(w)?;
    check_input(shape, train)?;
    let mut out = w.clone();
    if epochs == 0 {
        return Ok((out, Vec::new()));
    }

    let SurrogateShape {
        input_dim,
        hidden: h,
        classes,
    } = shape;
    let mut hk = out.tensor(HIDDEN_KERNEL).unwrap_or_default().to_vec();
    let mut hb = out.tensor(HIDDEN_BIAS).unwrap_or_default().to_vec();
    let mut lk = out.tensor(LOGITS_KERNEL).unwrap_or_default().to_vec();
    let mut lb = out.tensor(LOGITS_BIAS).unwrap_or_default().to_vec();

    let mut g_hk = vec![0.0f32; hk.len()];
    let mut g_hb = vec![0.0f32; hb.len()];
    let mut g_lk = vec![0.0f32; lk.len()];
    let mut g_lb = vec![0.0f32; lb.len()];
    let mut hidden = vec![0.0f32; h];
    let mut probs = vec![0.0f32; classes];
    let mut delta_h = vec![0.0f32; h];

    let n = train.len();
    let bs = cfg.batch_size.min(n);
    let n_batches = n / bs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(bs).take(n_batches) {
            g_hk.fill(0.0);
            g_hb.fill(0.0);
            g_lk.fill(0.0);
            g_lb.fill(0.0);
            for &i in batch {
                let x = train.row(i);
                let p = Params {
                    shape,
                    hk: &hk,
                    hb: &hb,
                    lk: &lk,
                    lb: &lb,
                };
                p.forward(x, &mut hidden, &mut probs);
                // d(loss)/d(logit) = p - onehot
                probs[train.label(i)] -= 1.0;
                delta_h.fill(0.0);
                for j in 0..h {
                    for c in 0..classes {
                        g_lk[j * classes + c] += hidden[j] * probs[c];
                        delta_h[j] += lk[j * classes + c] * probs[c];
                    }
                    if hidden[j] <= 0.0 {
                        delta_h[j] = 0.0;
                    }
                }
                for c in 0..classes {
                    g_lb[c] += probs[c];
                }
                for j in 0..h {
                    g_hb[j] += delta_h[j];
                    for k in 0..input_dim {
                        g_hk[k * h + j] += x[k] * delta_h[j];
                    }
                }
            }
            let step = cfg.learning_rate / batch.len() as f32;
            for (p, g) in hk.iter_mut().zip(&g_hk) {
                *p -= step * g;
            }
            for (p, g) in hb.iter_mut().zip(&g_hb) {
                *p -= step * g;
            }
            for (p, g) in lk.iter_mut().zip(&g_lk) {
                *p -= step * g;
            }
            for (p, g) in lb.iter_mut().zip(&g_lb) {
                *p -= step * g;
            }
        }
        let p = Params {
            shape,
            hk: &hk,
            hb: &hb,
            lk: &lk,
            lb: &lb,
        };
        let mut total = 0.0f64;
        for i in 0..n {
            p.forward(train.row(i), &mut hidden, &mut probs);
            total -= (probs[train.label(i)].max(1e-12) as f64).ln();
        }
        history.push((total / n as f64) as f32);
    }

    out.tensor_mut(HIDDEN_KERNEL).unwrap_or_default().copy_from_slice(&hk);
    out.tensor_mut(HIDDEN_BIAS).unwrap_or_default().copy_from_slice(&hb);
    out.tensor_mut(LOGITS_KERNEL).unwrap_or_default().copy_from_slice(&lk);
    out.tensor_mut(LOGITS_BIAS).unwrap_or_default().copy_from_slice(&lb);
    Ok((out, history))
}
