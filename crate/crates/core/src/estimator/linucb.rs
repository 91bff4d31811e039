//! Ridge-regression UCB with one shared design matrix and a separate
//! response vector per output channel.

use super::confidence::ConfidenceState;
use super::{CostEstimate, EstimatorError, TargetScale, UcbScore};

#[derive(Debug, Clone)]
pub struct LinUcb {
    a_inv: ConfidenceState,
    b: [Vec<f64>; 2],
    scale: TargetScale,
    observations: usize,
}

impl LinUcb {
    pub fn new(dim: usize, lambda: f64, scale: TargetScale) -> Result<Self, EstimatorError> {
        Ok(Self {
            a_inv: ConfidenceState::new(dim, lambda)?,
            b: [vec![0.0; dim], vec![0.0; dim]],
            scale,
            observations: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.a_inv.dim()
    }

    pub fn observations(&self) -> usize {
        self.observations
    }

    /// Row-major `A^{-1}`.
    pub fn a_inverse(&self) -> &[f64] {
        self.a_inv.z_inverse()
    }

    fn check(&self, x: &[f64]) -> Result<(), EstimatorError> {
        if x.len() != self.dim() {
            return Err(EstimatorError::Dimension {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Ridge coefficients `A^{-1} b` for channel 0 (time) and 1 (drop).
    pub fn coefficients(&self, channel: usize) -> Vec<f64> {
        let d = self.dim();
        let a = self.a_inv.z_inverse();
        (0..d)
            .map(|i| {
                a[i * d..(i + 1) * d]
                    .iter()
                    .zip(&self.b[channel])
                    .map(|(p, q)| p * q)
                    .sum()
            })
            .collect()
    }

    /// Normalised linear predictions before clamping.
    pub fn raw_output(&self, x: &[f64]) -> Result<[f64; 2], EstimatorError> {
        self.check(x)?;
        let dot = |c: usize| -> f64 {
            self.coefficients(c)
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        };
        Ok([dot(0), dot(1)])
    }

    pub fn predict(&self, x: &[f64]) -> Result<CostEstimate, EstimatorError> {
        Ok(self.scale.denormalise(&self.raw_output(x)?).clamped())
    }

    /// `sqrt(x^T A^{-1} x)`.
    pub fn uncertainty(&self, x: &[f64]) -> Result<f64, EstimatorError> {
        Ok(self.a_inv.quad_form(x)?.sqrt())
    }

    pub fn score(&self, x: &[f64], alpha: f64) -> Result<UcbScore, EstimatorError> {
        let est = self.predict(x)?;
        let bonus = if alpha == 0.0 {
            0.0
        } else {
            alpha * self.scale.batch_time * self.uncertainty(x)?
        };
        Ok(UcbScore::new(-est.batch_time, bonus))
    }

    pub fn observe(&mut self, x: &[f64], cost: CostEstimate) -> Result<(), EstimatorError> {
        self.check(x)?;
        self.a_inv.update(x, 1.0)?;
        let y = self.scale.normalise(cost);
        for (c, yc) in y.iter().enumerate() {
            for (bi, xi) in self.b[c].iter_mut().zip(x) {
                *bi += xi * yc;
            }
        }
        self.observations += 1;
        Ok(())
    }
}
