use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Isotropic Gaussian N(mean, var·I). `var == 0` marks a degenerate kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, var: f64) -> Self {
        GaussianParams { mean, var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.var <= 0.0
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if self.is_degenerate() {
            return Err(Error::invalid("log density of a degenerate kernel"));
        }
        let sq: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        let d = self.dim() as f64;
        Ok(-0.5 * (d * (2.0 * std::f64::consts::PI * self.var).ln() + sq / self.var))
    }

    /// KL(self ‖ other) in nats.
    pub fn kl(&self, other: &GaussianParams) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        if self.is_degenerate() || other.is_degenerate() {
            return Err(Error::invalid("KL with a degenerate kernel"));
        }
        let d = self.dim() as f64;
        let sq: f64 = self
            .mean
            .iter()
            .zip(&other.mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let ratio = self.var / other.var;
        Ok(0.5 * (d * (ratio - 1.0 - ratio.ln()) + sq / other.var))
    }

    /// mean + √var·ε
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        let sd = self.var.sqrt();
        self.mean.iter().zip(eps).map(|(m, e)| m + sd * e).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_density_at_origin() {
        let g = GaussianParams::new(vec![0.0], 1.0);
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((g.log_density(&[0.0]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn kl_of_identical_is_zero_and_shift_is_quadratic() {
        let a = GaussianParams::new(vec![1.0, 2.0], 0.3);
        assert_eq!(a.kl(&a).unwrap(), 0.0);
        let b = GaussianParams::new(vec![1.5, 2.0], 0.3);
        assert!((a.kl(&b).unwrap() - 0.25 / 0.6).abs() < 1e-15);
    }

    #[test]
    fn degenerate_rejected() {
        let a = GaussianParams::new(vec![1.0], 0.0);
        assert!(a.log_density(&[1.0]).is_err());
        assert!(a.kl(&a).is_err());
    }
}
