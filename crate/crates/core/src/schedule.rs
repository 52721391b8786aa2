//! Diffusion timeline: β/α/ᾱ sequences and the context gain k_t.
//!
//! Timesteps run `1..=T`. Index 0 holds the boundary values ᾱ_0 = 1 and
//! k_0 = 0, so the t = 1 posterior and DDIM formulas need no special case.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine-profile offset.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip for cosine-profile betas.
pub const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Serialized form of a schedule; arrays are always recomputed from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    0.02
}

impl ScheduleSpec {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            steps,
            beta_start,
            beta_end,
        }
    }

    pub fn cosine(steps: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            steps,
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: Option<ScheduleSpec>,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    gains: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
        }
        let mut betas = vec![0.0; steps + 1];
        match kind {
            ScheduleKind::Linear => {
                if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(Error::Schedule(format!(
                        "linear betas need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
                    )));
                }
                let span = (steps - 1) as f64;
                for (t, beta) in betas.iter_mut().enumerate().skip(1) {
                    *beta = beta_start + (t - 1) as f64 / span * (beta_end - beta_start);
                }
            }
            ScheduleKind::Cosine => {
                let profile = |t: usize| {
                    let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                for (t, beta) in betas.iter_mut().enumerate().skip(1) {
                    *beta = (1.0 - profile(t) / profile(t - 1)).min(COSINE_MAX_BETA);
                }
            }
        }
        let spec = ScheduleSpec {
            kind,
            steps,
            beta_start,
            beta_end,
        };
        Self::assemble(Some(spec), betas)
    }

    /// Schedule from an explicit β_1..β_T sequence (no serializable spec).
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {}", betas.len())));
        }
        let mut all = vec![0.0];
        all.extend_from_slice(betas);
        Self::assemble(None, all)
    }

    fn assemble(spec: Option<ScheduleSpec>, betas: Vec<f64>) -> Result<Self> {
        let steps = betas.len() - 1;
        let mut alphas = vec![1.0; steps + 1];
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            alphas[t] = 1.0 - betas[t];
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        let mut gains = vec![0.0; steps + 1];
        for t in 1..steps {
            let s = alpha_bars[t].sqrt();
            gains[t] = s * (1.0 - s);
        }
        let schedule = NoiseSchedule {
            spec,
            betas,
            alphas,
            alpha_bars,
            gains,
        };
        schedule.check_invariants()?;
        Ok(schedule)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let steps = self.steps();
        for t in 1..=steps {
            let b = self.betas[t];
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Schedule(format!("beta_{t} = {b} outside (0, 1)")));
            }
            if self.alpha_bars[t] >= self.alpha_bars[t - 1] {
                return Err(Error::Schedule(format!("alpha_bar not decreasing at t = {t}")));
            }
        }
        let last = self.alpha_bars[steps];
        if !(last > 0.0 && last < 1.0) {
            return Err(Error::Schedule(format!("alpha_bar_T = {last} outside (0, 1)")));
        }
        if self.gains.iter().any(|&k| !(0.0..=0.25).contains(&k)) {
            return Err(Error::Schedule("context gain outside [0, 0.25]".into()));
        }
        Ok(())
    }

    /// `None` for schedules built from explicit betas.
    pub fn spec(&self) -> Option<&ScheduleSpec> {
        self.spec.as_ref()
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::Timestep {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    // Unchecked accessors; callers validate `t` first. Index 0 is the boundary.

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn gain(&self, t: usize) -> f64 {
        self.gains[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    /// k_t with the boundary clamps k_0 = k_T = 0.
    pub fn context_gain(&self, t: usize) -> Result<f64> {
        self.check_t(t, 0)?;
        Ok(self.gains[t])
    }
}

/// √ᾱ·(1 − √ᾱ), the unclamped gain formula.
pub fn gain_from_alpha_bar(alpha_bar: f64) -> f64 {
    let s = alpha_bar.sqrt();
    s * (1.0 - s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_endpoints_and_interpolation() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 20, 0.00085, 0.012).unwrap();
        assert_eq!(s.beta(1), 0.00085);
        assert!((s.beta(20) - 0.012).abs() < 1e-15);
        // 0.00085 + (1/19)·(0.012 − 0.00085)
        assert!((s.beta(2) - 0.001436842105263158).abs() < 1e-15);
    }

    #[test]
    fn degenerate_linear_is_constant() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 2, 0.3, 0.3).unwrap();
        assert_eq!(s.beta(1), 0.3);
        assert_eq!(s.beta(2), 0.3);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Cosine, 1, 0.0, 0.0).is_err());
    }

    #[test]
    fn gain_boundaries() {
        let s = ScheduleSpec::cosine(50).build().unwrap();
        assert_eq!(s.context_gain(0).unwrap(), 0.0);
        assert_eq!(s.context_gain(50).unwrap(), 0.0);
        assert!(s.context_gain(51).is_err());
        assert_eq!(gain_from_alpha_bar(1.0), 0.0);
        assert_eq!(gain_from_alpha_bar(0.25), 0.25);
    }

    #[test]
    fn explicit_betas() {
        let s = NoiseSchedule::from_betas(&[0.2, 0.1, 0.05]).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!(s.spec().is_none());
        assert!(NoiseSchedule::from_betas(&[0.2]).is_err());
        assert!(NoiseSchedule::from_betas(&[0.2, 1.0]).is_err());
    }

    #[test]
    fn cosine_clips_final_beta() {
        let s = ScheduleSpec::cosine(100).build().unwrap();
        assert_eq!(s.beta(100), COSINE_MAX_BETA);
        assert!(s.alpha_bar(100) > 0.0);
    }

    proptest! {
        #[test]
        fn invariants_hold(steps in 2usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.3, cosine: bool) {
            let s = if cosine {
                ScheduleSpec::cosine(steps).build().unwrap()
            } else {
                NoiseSchedule::new(ScheduleKind::Linear, steps, lo, lo + span).unwrap()
            };
            for t in 1..=steps {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
                prop_assert!((ratio - s.alpha(t)).abs() < 1e-12);
                let k = s.gain(t);
                prop_assert!((0.0..=0.25).contains(&k));
                if t < steps {
                    prop_assert_eq!(k, gain_from_alpha_bar(s.alpha_bar(t)));
                }
            }
            prop_assert_eq!(s.gain(steps), 0.0);
        }
    }
}
