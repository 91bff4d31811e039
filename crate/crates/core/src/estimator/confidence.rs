//! Inverse design matrix maintained by rank-one Sherman–Morrison updates.

use super::EstimatorError;

/// Holds `Z^{-1}` where `Z = lambda I + sum g g^T / m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceState {
    dim: usize,
    lambda: f64,
    z_inv: Vec<f64>,
    updates: usize,
}

impl ConfidenceState {
    pub fn new(dim: usize, lambda: f64) -> Result<Self, EstimatorError> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(EstimatorError::Config(format!(
                "ridge lambda must be positive, got {lambda}"
            )));
        }
        let mut z_inv = vec![0.0; dim * dim];
        for i in 0..dim {
            z_inv[i * dim + i] = 1.0 / lambda;
        }
        Ok(Self {
            dim,
            lambda,
            z_inv,
            updates: 0,
        })
    }

    /// Restores a state from a stored inverse (row-major, `dim * dim`).
    pub fn from_inverse(
        dim: usize,
        lambda: f64,
        z_inv: Vec<f64>,
        updates: usize,
    ) -> Result<Self, EstimatorError> {
        if z_inv.len() != dim * dim {
            return Err(EstimatorError::Dimension {
                expected: dim * dim,
                actual: z_inv.len(),
            });
        }
        Ok(Self {
            dim,
            lambda,
            z_inv,
            updates,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn update_count(&self) -> usize {
        self.updates
    }

    /// Row-major `Z^{-1}`.
    pub fn z_inverse(&self) -> &[f64] {
        &self.z_inv
    }

    fn check(&self, g: &[f64]) -> Result<(), EstimatorError> {
        if g.len() != self.dim {
            return Err(EstimatorError::Dimension {
                expected: self.dim,
                actual: g.len(),
            });
        }
        Ok(())
    }

    fn apply(&self, g: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                self.z_inv[i * d..(i + 1) * d]
                    .iter()
                    .zip(g)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// `g^T Z^{-1} g`; fails if the maintained inverse has lost definiteness.
    pub fn quad_form(&self, g: &[f64]) -> Result<f64, EstimatorError> {
        self.check(g)?;
        let u = self.apply(g);
        let q: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        let norm2: f64 = g.iter().map(|v| v * v).sum();
        if !q.is_finite() || q < -1e-12 * norm2.max(1.0) {
            return Err(EstimatorError::NotPositiveDefinite);
        }
        Ok(q.max(0.0))
    }

    /// `Z <- Z + g g^T / m`, i.e.
    /// `Z^{-1} <- Z^{-1} - (Z^{-1} g)(Z^{-1} g)^T / (m + g^T Z^{-1} g)`.
    pub fn update(&mut self, g: &[f64], m: f64) -> Result<(), EstimatorError> {
        self.check(g)?;
        if g.iter().all(|&v| v == 0.0) {
            return Ok(());
        }
        let u = self.apply(g);
        let q: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        let denom = m + q;
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(EstimatorError::NotPositiveDefinite);
        }
        let d = self.dim;
        for i in 0..d {
            let ui = u[i] / denom;
            for j in i..d {
                let v = 0.5 * (self.z_inv[i * d + j] + self.z_inv[j * d + i]) - ui * u[j];
                self.z_inv[i * d + j] = v;
                self.z_inv[j * d + i] = v;
            }
        }
        self.updates += 1;
        Ok(())
    }
}
