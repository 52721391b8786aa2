//! Analytically solvable conditional-Gaussian setting: x₀ = μ(c) + σ(c)ε with
//! a linear adapter r·x₀. Closed-form optimal estimation errors for the plain
//! and adapted forward processes, plus a Monte-Carlo oracle for both.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{stream, NoiseSource};

/// Per-class means μ(c) in ℝ^d and isotropic scales σ(c) > 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModel {
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
}

impl ToyModel {
    pub fn new(means: Vec<Vec<f64>>, sigmas: Vec<f64>) -> Result<Self> {
        let m = ToyModel { means, sigmas };
        m.validate()?;
        Ok(m)
    }

    /// μ(0) = (−2, 0), μ(1) = (2, 0), σ = 0.5.
    pub fn two_class() -> Self {
        ToyModel {
            means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            sigmas: vec![0.5, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() {
            return Err(Error::invalid("toy model needs at least one class"));
        }
        if self.means.len() != self.sigmas.len() {
            return Err(Error::invalid(format!(
                "{} class means but {} sigmas",
                self.means.len(),
                self.sigmas.len()
            )));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::invalid("class means must share a positive dimension"));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("class means must be finite"));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("class sigma must be > 0, got {s}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.classes() {
            return Err(Error::Class {
                class: c,
                classes: self.classes(),
            });
        }
        Ok(())
    }

    pub fn sample<N: NoiseSource + ?Sized>(&self, c: usize, noise: &mut N) -> Result<Vec<f64>> {
        self.check_class(c)?;
        let s = self.sigmas[c];
        Ok(self.means[c].iter().map(|m| m + s * noise.standard_normal()).collect())
    }
}

fn check_domain(sigma_c: f64, alpha_bar: f64, r: f64, d: usize) -> Result<()> {
    if !(sigma_c > 0.0) || !sigma_c.is_finite() {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma_c}")));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!("alpha_bar must be in [0, 1], got {alpha_bar}")));
    }
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("adapter strength must be >= 0, got {r}")));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be >= 1"));
    }
    Ok(())
}

/// Expected ‖E[x₀ | x_t, c] − x₀‖² for x_t = √ᾱ·x₀ + √(1 − ᾱ)·ε′.
pub fn ddpm_optimal_error(sigma_c: f64, alpha_bar: f64, d: usize) -> Result<f64> {
    check_domain(sigma_c, alpha_bar, 0.0, d)?;
    let s2 = sigma_c * sigma_c;
    Ok(d as f64 * s2 * (1.0 - alpha_bar) / (1.0 - alpha_bar + alpha_bar * s2))
}

/// As [`ddpm_optimal_error`] with x_t = (r + √ᾱ)·x₀ + √(1 − ᾱ)·ε′.
pub fn contextdiff_optimal_error(sigma_c: f64, alpha_bar: f64, r: f64, d: usize) -> Result<f64> {
    check_domain(sigma_c, alpha_bar, r, d)?;
    let s2 = sigma_c * sigma_c;
    let a = r + alpha_bar.sqrt();
    Ok(d as f64 * s2 * (1.0 - alpha_bar) / (1.0 - alpha_bar + a * a * s2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

const SHARDS: usize = 64;

/// Brute-force error of the conditional-mean estimator for class `c`.
///
/// The n draws are split into fixed shards, each on its own rng stream, and
/// reduced in shard order, so the result does not depend on thread count.
pub fn mc_error(model: &ToyModel, c: usize, alpha_bar: f64, r: f64, n: usize, seed: u64) -> Result<McEstimate> {
    model.check_class(c)?;
    let sigma = model.sigmas[c];
    check_domain(sigma, alpha_bar, r, model.dim())?;
    if n == 0 {
        return Err(Error::invalid("mc_error needs n >= 1"));
    }
    let mu = &model.means[c];
    let s2 = sigma * sigma;
    let a = r + alpha_bar.sqrt();
    let noise_sd = (1.0 - alpha_bar).sqrt();
    let gain = s2 * a / (1.0 - alpha_bar + a * a * s2);
    let partials: Vec<(f64, f64)> = (0..SHARDS)
        .into_par_iter()
        .map(|shard| {
            let count = n / SHARDS + usize::from(shard < n % SHARDS);
            let mut rng = stream(seed, shard as u64);
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            let mut est = vec![0.0; mu.len()];
            for _ in 0..count {
                let mut err = 0.0;
                for (j, m) in mu.iter().enumerate() {
                    let x0 = m + sigma * rng.standard_normal();
                    let x_t = a * x0 + noise_sd * rng.standard_normal();
                    est[j] = m + gain * (x_t - a * m);
                    err += (est[j] - x0) * (est[j] - x0);
                }
                sum += err;
                sum_sq += err * err;
            }
            (sum, sum_sq)
        })
        .collect();
    let (sum, sum_sq) = partials.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 { (sum_sq - nf * mean * mean).max(0.0) / (nf - 1.0) } else { 0.0 };
    Ok(McEstimate {
        mean,
        std_error: (var / nf).sqrt(),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha_bar: f64,
    pub r: f64,
    pub ddpm: f64,
    pub contextdiff: f64,
    pub mc_mean: f64,
    pub mc_std_error: f64,
}

/// Closed forms and MC estimates over an (ᾱ_t, r) grid for class `c`.
pub fn error_sweep(
    model: &ToyModel,
    c: usize,
    alpha_bars: &[f64],
    rs: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(alpha_bars.len() * rs.len());
    for (i, &ab) in alpha_bars.iter().enumerate() {
        for (j, &r) in rs.iter().enumerate() {
            let mc = mc_error(model, c, ab, r, n, seed.wrapping_add((i * rs.len() + j) as u64))?;
            rows.push(SweepRow {
                alpha_bar: ab,
                r,
                ddpm: ddpm_optimal_error(model.sigmas[c], ab, model.dim())?,
                contextdiff: contextdiff_optimal_error(model.sigmas[c], ab, r, model.dim())?,
                mc_mean: mc.mean,
                mc_std_error: mc.std_error,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_worked_values() {
        assert_eq!(ddpm_optimal_error(1.0, 1.0, 3).unwrap(), 0.0);
        assert!((ddpm_optimal_error(0.7, 0.0, 2).unwrap() - 2.0 * 0.49).abs() < 1e-15);
        assert!((ddpm_optimal_error(1.0, 0.5, 2).unwrap() - 1.0).abs() < 1e-15);
        // 2·0.5 / (0.5 + (0.2 + √0.5)²)
        assert!((contextdiff_optimal_error(1.0, 0.5, 0.2, 2).unwrap() - 0.7559477710916341).abs() < 1e-15);
        assert!(contextdiff_optimal_error(1.0, 0.5, 1e9, 2).unwrap() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(ddpm_optimal_error(0.0, 0.5, 2).is_err());
        assert!(ddpm_optimal_error(1.0, 1.5, 2).is_err());
        assert!(ddpm_optimal_error(1.0, 0.5, 0).is_err());
        assert!(contextdiff_optimal_error(1.0, 0.5, -0.1, 2).is_err());
        assert!(ToyModel::new(vec![vec![0.0]], vec![-1.0]).is_err());
        assert!(ToyModel::new(vec![vec![0.0], vec![0.0, 1.0]], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn mc_matches_closed_forms() {
        let m = ToyModel::new(vec![vec![0.3, -1.0]], vec![1.0]).unwrap();
        for (r, exact) in [(0.0, 1.0), (0.2, 0.7559477710916341)] {
            let e = mc_error(&m, 0, 0.5, r, 200_000, 11).unwrap();
            assert!((e.mean - exact).abs() < 4.0 * e.std_error, "{e:?} vs {exact}");
        }
    }

    #[test]
    fn mc_is_deterministic_and_handles_tiny_sigma() {
        let m = ToyModel::new(vec![vec![1.0, 2.0]], vec![1e-9]).unwrap();
        let a = mc_error(&m, 0, 0.3, 0.1, 1000, 5).unwrap();
        assert_eq!(a, mc_error(&m, 0, 0.3, 0.1, 1000, 5).unwrap());
        assert!(a.mean < 1e-16);
        assert_eq!(mc_error(&m, 0, 0.3, 0.1, 1, 5).unwrap().n, 1);
        assert!(mc_error(&m, 0, 0.3, 0.1, 0, 5).is_err());
    }

    proptest! {
        #[test]
        fn adapter_reduces_error(sigma in 0.01f64..5.0, ab in 0.001f64..0.999, r in 1e-4f64..10.0, d in 1usize..8) {
            let plain = ddpm_optimal_error(sigma, ab, d).unwrap();
            let at_zero = contextdiff_optimal_error(sigma, ab, 0.0, d).unwrap();
            prop_assert!((at_zero - plain).abs() <= 4.0 * f64::EPSILON * plain);
            let adapted = contextdiff_optimal_error(sigma, ab, r, d).unwrap();
            prop_assert!(adapted < plain);
            prop_assert!(contextdiff_optimal_error(sigma, ab, r * 1.5, d).unwrap() < adapted);
        }
    }
}
