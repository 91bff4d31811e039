//! Synthetic non-IID classification data for the surrogate task.
//!
//! Every client draws from the same Gaussian mixture (class centres on a
//! circle) seen through its own "dialect": the whole feature space is rotated
//! by a client-specific angle and the label prior is tilted towards a
//! client-specific class.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Row-major feature matrix plus class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<usize>,
}

impl Samples {
    pub fn new(dim: usize, features: Vec<f32>, labels: Vec<usize>) -> Result<Self, ModelError> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(ModelError::Dataset(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Returns a copy with rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Samples {
        let mut features = Vec::with_capacity(self.features.len());
        let mut labels = Vec::with_capacity(self.labels.len());
        for &i in order {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Samples {
            dim: self.dim,
            features,
            labels,
        }
    }

    /// Concatenates several sample sets of equal width.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Samples>) -> Result<Samples, ModelError> {
        let mut out: Option<Samples> = None;
        for part in parts {
            match out.as_mut() {
                None => out = Some(part.clone()),
                Some(acc) => {
                    if acc.dim != part.dim {
                        return Err(ModelError::Dataset("feature widths differ".into()));
                    }
                    acc.features.extend_from_slice(&part.features);
                    acc.labels.extend_from_slice(&part.labels);
                }
            }
        }
        out.ok_or_else(|| ModelError::Dataset("nothing to concatenate".into()))
    }
}

/// One client's local data: a training split and a validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub train: Samples,
    pub validation: Samples,
    /// Distribution-shift parameter the split was drawn with.
    pub dialect: f64,
}

impl LocalDataset {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }
}

/// Parameters of the shared Gaussian-mixture task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureTask {
    pub classes: usize,
    /// Distance of each class centre from the origin.
    pub radius: f64,
    /// Isotropic standard deviation around a centre.
    pub spread: f64,
    /// Rotation (radians) applied at dialect 0 and, negated, at dialect 1.
    pub max_rotation: f64,
    /// Strength of the label-prior tilt, in `[0, 1)`.
    pub label_skew: f64,
}

impl Default for MixtureTask {
    fn default() -> Self {
        Self {
            classes: 4,
            radius: 2.0,
            spread: 0.9,
            max_rotation: 0.7,
            label_skew: 0.6,
        }
    }
}

impl MixtureTask {
    pub const FEATURE_DIM: usize = 2;

    fn rotation(&self, dialect: f64) -> f64 {
        self.max_rotation * (1.0 - 2.0 * dialect)
    }

    fn class_weights(&self, dialect: f64) -> Vec<f64> {
        let c = self.classes as f64;
        (0..self.classes)
            .map(|k| 1.0 + self.label_skew * (2.0 * PI * (k as f64 / c - dialect)).cos())
            .collect()
    }

    /// Draws `n` labelled samples for a client with the given dialect.
    pub fn sample<R: Rng + ?Sized>(&self, dialect: f64, n: usize, rng: &mut R) -> Samples {
        let weights = self.class_weights(dialect);
        let picker = WeightedIndex::new(&weights).expect("class weights are positive");
        let (sin, cos) = self.rotation(dialect).sin_cos();
        let mut features = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = picker.sample(rng);
            let angle = 2.0 * PI * label as f64 / self.classes as f64;
            let nx: f64 = StandardNormal.sample(rng);
            let ny: f64 = StandardNormal.sample(rng);
            let x = self.radius * angle.cos() + self.spread * nx;
            let y = self.radius * angle.sin() + self.spread * ny;
            features.push((cos * x - sin * y) as f32);
            features.push((sin * x + cos * y) as f32);
            labels.push(label);
        }
        Samples {
            dim: Self::FEATURE_DIM,
            features,
            labels,
        }
    }

    /// Draws a client dataset with the given split sizes.
    pub fn client_dataset<R: Rng + ?Sized>(
        &self,
        dialect: f64,
        n_train: usize,
        n_val: usize,
        rng: &mut R,
    ) -> LocalDataset {
        let train = self.sample(dialect, n_train, rng);
        let validation = self.sample(dialect, n_val, rng);
        LocalDataset {
            train,
            validation,
            dialect,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = MixtureTask::default().client_dataset(0.3, 25, 10, &mut rng);
        assert_eq!(ds.train.len(), 25);
        assert_eq!(ds.validation.len(), 10);
        assert_eq!(ds.train.dim(), 2);
        assert!(ds.train.labels().iter().all(|&l| l < 4));
    }

    #[test]
    fn label_prior_tilts_towards_home_class() {
        let task = MixtureTask::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = task.sample(0.0, 4000, &mut rng);
        let mut counts = [0usize; 4];
        for &l in s.labels() {
            counts[l] += 1;
        }
        // dialect 0 favours class 0 and disfavours the opposite class 2
        assert!(counts[0] > counts[1] && counts[0] > counts[3]);
        assert!(counts[2] < counts[1] && counts[2] < counts[3]);
    }

    #[test]
    fn concat_and_permute() {
        let a = Samples::new(1, vec![1., 2.], vec![0, 1]).unwrap();
        let b = Samples::new(1, vec![3.], vec![2]).unwrap();
        let c = Samples::concat([&a, &b]).unwrap();
        assert_eq!(c.len(), 3);
        let p = c.permuted(&[2, 0, 1]);
        assert_eq!(p.row(0), &[3.]);
        assert_eq!(p.labels(), &[2, 0, 1]);
    }
}
