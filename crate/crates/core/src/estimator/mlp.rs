//! Bias-free rectifier network with a `sqrt(m)` output multiplier.
//!
//! `f(x) = sqrt(m) * W_L relu(W_{L-1} relu(... relu(W_1 x)))`, where every
//! `W_l` is stored row-major as `(out, in)` and the parameter vector is the
//! concatenation `[vec(W_1); ...; vec(W_L)]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EstimatorError;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    width: usize,
    theta: Vec<f64>,
    offsets: Vec<usize>,
}

/// Per-layer pre-activations from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pre: Vec<Vec<f64>>,
}

fn offsets_for(sizes: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    offsets.push(0);
    for w in sizes.windows(2) {
        acc += w[0] * w[1];
        offsets.push(acc);
    }
    offsets
}

impl Mlp {
    /// `sizes` lists layer widths from input to output, e.g. `[4, 32, 16, 2]`;
    /// `width` is the `m` in the output multiplier.
    pub fn zeros(sizes: &[usize], width: usize) -> Result<Self, EstimatorError> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) || width == 0 {
            return Err(EstimatorError::Architecture(format!(
                "invalid layer sizes {sizes:?} / width {width}"
            )));
        }
        let offsets = offsets_for(sizes);
        Ok(Self {
            sizes: sizes.to_vec(),
            width,
            theta: vec![0.0; *offsets.last().expect("non-empty")],
            offsets,
        })
    }

    /// He-normal hidden layers; the output layer is scaled down by
    /// `sqrt(m)` so initial outputs are O(1).
    pub fn random<R: Rng + ?Sized>(
        sizes: &[usize],
        width: usize,
        rng: &mut R,
    ) -> Result<Self, EstimatorError> {
        let mut net = Self::zeros(sizes, width)?;
        let layers = net.layer_count();
        for l in 0..layers {
            let fan_in = net.sizes[l] as f64;
            let std = if l + 1 == layers {
                1.0 / (fan_in * width as f64).sqrt()
            } else {
                (2.0 / fan_in).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let (a, b) = (net.offsets[l], net.offsets[l + 1]);
            for v in &mut net.theta[a..b] {
                *v = normal.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn from_theta(sizes: &[usize], width: usize, theta: Vec<f64>) -> Result<Self, EstimatorError> {
        let mut net = Self::zeros(sizes, width)?;
        if theta.len() != net.theta.len() {
            return Err(EstimatorError::Dimension {
                expected: net.theta.len(),
                actual: theta.len(),
            });
        }
        net.theta = theta;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Row-major `(out, in)` block of layer `l`.
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.theta[self.offsets[l]..self.offsets[l + 1]]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        let (a, b) = (self.offsets[l], self.offsets[l + 1]);
        &mut self.theta[a..b]
    }

    fn check_input(&self, x: &[f64]) -> Result<(), EstimatorError> {
        if x.len() != self.input_dim() {
            return Err(EstimatorError::Dimension {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Network outputs (before any clamping).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, EstimatorError> {
        self.check_input(x)?;
        let mut cache = ForwardCache::default();
        Ok(self.forward_cached(x, &mut cache))
    }

    /// Forward pass that records pre-activations for [`Mlp::backward`].
    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) -> Vec<f64> {
        let layers = self.layer_count();
        cache.pre.resize(layers, Vec::new());
        let mut input: Vec<f64> = x.to_vec();
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.layer(l);
            let pre = &mut cache.pre[l];
            pre.clear();
            pre.extend((0..n_out).map(|r| {
                w[r * n_in..(r + 1) * n_in]
                    .iter()
                    .zip(&input)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            }));
            if l + 1 < layers {
                input = pre.iter().map(|&v| v.max(0.0)).collect();
            }
        }
        let scale = (self.width as f64).sqrt();
        cache.pre[layers - 1].iter().map(|v| scale * v).collect()
    }

    /// Accumulates `d loss / d theta` into `grad`, given `d loss / d output`.
    pub fn backward(&self, x: &[f64], cache: &ForwardCache, out_grad: &[f64], grad: &mut [f64]) {
        let layers = self.layer_count();
        let scale = (self.width as f64).sqrt();
        let mut delta: Vec<f64> = out_grad.iter().map(|g| scale * g).collect();
        for l in (0..layers).rev() {
            let n_in = self.sizes[l];
            let off = self.offsets[l];
            // activation feeding layer l
            let act = |i: usize| -> f64 {
                if l == 0 {
                    x[i]
                } else {
                    cache.pre[l - 1][i].max(0.0)
                }
            };
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + r * n_in..off + (r + 1) * n_in];
                for (i, g) in row.iter_mut().enumerate() {
                    *g += d * act(i);
                }
            }
            if l > 0 {
                let w = self.layer(l);
                let mut prev = vec![0.0; n_in];
                for (r, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (i, p) in prev.iter_mut().enumerate() {
                        *p += w[r * n_in + i] * d;
                    }
                }
                for (i, p) in prev.iter_mut().enumerate() {
                    if cache.pre[l - 1][i] <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Exact gradient of output `channel` with respect to the parameters.
    pub fn gradient(&self, x: &[f64], channel: usize) -> Result<Vec<f64>, EstimatorError> {
        self.check_input(x)?;
        if channel >= self.output_dim() {
            return Err(EstimatorError::Dimension {
                expected: self.output_dim(),
                actual: channel,
            });
        }
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        let mut out_grad = vec![0.0; self.output_dim()];
        out_grad[channel] = 1.0;
        let mut grad = vec![0.0; self.param_count()];
        self.backward(x, &cache, &out_grad, &mut grad);
        Ok(grad)
    }

    /// Half mean squared error over `(x, y)` pairs.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let mut cache = ForwardCache::default();
        let total: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                self.forward_cached(x, &mut cache)
                    .iter()
                    .zip(y)
                    .map(|(f, t)| (f - t) * (f - t))
                    .sum::<f64>()
            })
            .sum();
        0.5 * total / xs.len() as f64
    }

    /// Gradient of [`Mlp::loss`].
    pub fn loss_gradient(&self, xs: &[Vec<f64>], ys: &[Vec<f64>], grad: &mut [f64]) {
        grad.fill(0.0);
        if xs.is_empty() {
            return;
        }
        let inv_n = 1.0 / xs.len() as f64;
        let mut cache = ForwardCache::default();
        let mut out_grad = vec![0.0; self.output_dim()];
        for (x, y) in xs.iter().zip(ys) {
            let f = self.forward_cached(x, &mut cache);
            for ((g, fv), t) in out_grad.iter_mut().zip(&f).zip(y) {
                *g = (fv - t) * inv_n;
            }
            self.backward(x, &cache, &out_grad, grad);
        }
    }
}
