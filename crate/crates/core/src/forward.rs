//! The contextualized forward process.
//!
//! q(x_t | x₀, c)          = N(√ᾱ_t·x₀ + b_t, (1 − ᾱ_t)·I)
//! q(x_t | x_{t−1}, x₀, c) = N(√α_t·x_{t−1} + b_t − √α_t·b_{t−1}, β_t·I)
//! q(x_{t−1} | x_t, x₀, c) = N(c₁·x₀ + c₂·(x_t − b_t) + b_{t−1}, σ̃²_t·I)
//!
//! with b_t = k_t·r_φ(x₀, c, t), c₁ = √ᾱ_{t−1}β_t/(1 − ᾱ_t),
//! c₂ = √α_t(1 − ᾱ_{t−1})/(1 − ᾱ_t) and σ̃²_t = (1 − ᾱ_{t−1})β_t/(1 − ᾱ_t).

use serde::{Deserialize, Serialize};

use crate::adapter::{Condition, ContextAdapter};
use crate::error::{Error, Result};
pub use crate::gaussian::GaussianParams;
use crate::noise::NoiseSource;
use crate::schedule::NoiseSchedule;

/// Deliberate formula errors, used to show the verification suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    #[default]
    None,
    /// Drop −√α_t·b_{t−1} from the transition mean.
    DropTransitionPrevBias,
    /// Drop +b_{t−1} from the posterior / reverse-step mean.
    DropPosteriorPrevBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisySample {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub source: Option<usize>,
    pub condition: Condition,
}

/// Posterior coefficients (c₁, c₂, σ̃²) at timestep t ≥ 1.
pub fn posterior_coefs(schedule: &NoiseSchedule, t: usize) -> (f64, f64, f64) {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let beta = schedule.beta(t);
    let c1 = ab_prev.sqrt() * beta / (1.0 - ab);
    let c2 = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let var = (1.0 - ab_prev) * beta / (1.0 - ab);
    (c1, c2, var)
}

/// Posterior mean c₁·x₀ + c₂·(x_t − b_t) + b_{t−1} given precomputed biases.
pub(crate) fn posterior_mean(c1: f64, c2: f64, x0: &[f64], x_t: &[f64], b_t: &[f64], b_prev: &[f64], fault: Fault) -> Vec<f64> {
    x0.iter()
        .zip(x_t)
        .zip(b_t.iter().zip(b_prev))
        .map(|((x0, xt), (bt, bp))| {
            let m = c1 * x0 + c2 * (xt - bt);
            if fault == Fault::DropPosteriorPrevBias {
                m
            } else {
                m + bp
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompositionReport {
    pub max_mean_deviation: f64,
    pub max_rel_var_deviation: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BayesReport {
    pub max_discrepancy: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardProcess<'a> {
    pub schedule: &'a NoiseSchedule,
    pub adapter: &'a ContextAdapter,
    pub fault: Fault,
}

impl<'a> ForwardProcess<'a> {
    pub fn new(schedule: &'a NoiseSchedule, adapter: &'a ContextAdapter) -> Self {
        ForwardProcess {
            schedule,
            adapter,
            fault: Fault::None,
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = fault;
        self
    }

    fn bias(&self, x0: &[f64], c: Condition, t: usize) -> Result<Vec<f64>> {
        self.adapter.bias(self.schedule, x0, c, t)
    }

    /// q(x_t | x₀, c) for t in 1..=T.
    pub fn marginal(&self, x0: &[f64], c: Condition, t: usize) -> Result<GaussianParams> {
        self.schedule.check_t(t, 1)?;
        let b = self.bias(x0, c, t)?;
        let s = self.schedule.alpha_bar(t).sqrt();
        let mean = x0.iter().zip(&b).map(|(x, b)| s * x + b).collect();
        Ok(GaussianParams::new(mean, 1.0 - self.schedule.alpha_bar(t)))
    }

    /// x_t = mean + √(1 − ᾱ_t)·ε, drawing ε from `noise`.
    pub fn sample_marginal<N: NoiseSource + ?Sized>(
        &self,
        x0: &[f64],
        c: Condition,
        t: usize,
        noise: &mut N,
    ) -> Result<NoisySample> {
        let m = self.marginal(x0, c, t)?;
        let eps = noise.standard_normal_vec(x0.len());
        Ok(NoisySample {
            x_t: m.sample_with(&eps),
            t,
            source: None,
            condition: c,
        })
    }

    /// q(x_t | x_{t−1}, x₀, c) for t in 1..=T.
    pub fn transition(&self, x_prev: &[f64], x0: &[f64], c: Condition, t: usize) -> Result<GaussianParams> {
        self.schedule.check_t(t, 1)?;
        if x_prev.len() != x0.len() {
            return Err(Error::Dimension {
                expected: x0.len(),
                got: x_prev.len(),
            });
        }
        let b_t = self.bias(x0, c, t)?;
        let b_prev = self.bias(x0, c, t - 1)?;
        let sa = self.schedule.alpha(t).sqrt();
        let mean = x_prev
            .iter()
            .zip(b_t.iter().zip(&b_prev))
            .map(|(xp, (bt, bp))| {
                let m = sa * xp + bt;
                if self.fault == Fault::DropTransitionPrevBias {
                    m
                } else {
                    m - sa * bp
                }
            })
            .collect();
        Ok(GaussianParams::new(mean, self.schedule.beta(t)))
    }

    /// q(x_{t−1} | x_t, x₀, c) for t in 1..=T; degenerate (var 0) at t = 1.
    pub fn posterior(&self, x_t: &[f64], x0: &[f64], c: Condition, t: usize) -> Result<GaussianParams> {
        self.schedule.check_t(t, 1)?;
        if x_t.len() != x0.len() {
            return Err(Error::Dimension {
                expected: x0.len(),
                got: x_t.len(),
            });
        }
        let (c1, c2, var) = posterior_coefs(self.schedule, t);
        let b_t = self.bias(x0, c, t)?;
        let b_prev = self.bias(x0, c, t - 1)?;
        Ok(GaussianParams::new(
            posterior_mean(c1, c2, x0, x_t, &b_t, &b_prev, self.fault),
            var,
        ))
    }

    /// Propagates (mean, var) through the transition kernels for t = 1..=T
    /// and compares against the closed-form marginal at every step.
    pub fn verify_composition(&self, x0: &[f64], c: Condition) -> Result<CompositionReport> {
        let mut mean = x0.to_vec();
        let mut var = 0.0;
        let mut report = CompositionReport {
            max_mean_deviation: 0.0,
            max_rel_var_deviation: 0.0,
            steps: self.schedule.steps(),
        };
        for t in 1..=self.schedule.steps() {
            // The transition is affine in x_{t−1} with slope √α_t, so applying
            // it to the running mean propagates the mean exactly.
            let step = self.transition(&mean, x0, c, t)?;
            mean = step.mean;
            var = self.schedule.alpha(t) * var + step.var;
            let target = self.marginal(x0, c, t)?;
            for (a, b) in mean.iter().zip(&target.mean) {
                report.max_mean_deviation = report.max_mean_deviation.max((a - b).abs());
            }
            let rel = (var - target.var).abs() / target.var;
            report.max_rel_var_deviation = report.max_rel_var_deviation.max(rel);
        }
        Ok(report)
    }

    /// Checks log q(x_{t−1}|x₀) + log q(x_t|x_{t−1},x₀) = log q(x_t|x₀) + log q(x_{t−1}|x_t,x₀)
    /// at every probe pair (x_{t−1}, x_t).
    pub fn verify_bayes_identity(
        &self,
        x0: &[f64],
        c: Condition,
        t: usize,
        probes: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<BayesReport> {
        if t < 2 {
            return Err(Error::Timestep {
                t,
                lo: 2,
                hi: self.schedule.steps(),
            });
        }
        self.schedule.check_t(t, 2)?;
        if probes.is_empty() {
            return Err(Error::invalid("Bayes identity needs at least one probe"));
        }
        let prev_marginal = self.marginal(x0, c, t - 1)?;
        let marginal = self.marginal(x0, c, t)?;
        let mut max = 0.0f64;
        for (x_prev, x_t) in probes {
            let lhs = prev_marginal.log_density(x_prev)? + self.transition(x_prev, x0, c, t)?.log_density(x_t)?;
            let rhs = marginal.log_density(x_t)? + self.posterior(x_t, x0, c, t)?.log_density(x_prev)?;
            max = max.max((lhs - rhs).abs());
        }
        Ok(BayesReport {
            max_discrepancy: max,
            probes: probes.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{LearnedAdapterSpec, OutputInit};
    use crate::noise::{seeded, ZeroNoise};
    use crate::schedule::ScheduleSpec;

    const C: Condition = Condition { class: 0 };

    #[test]
    fn zero_adapter_marginal_worked_case() {
        // ᾱ_1 = 0.81: mean 0.9, var 0.19
        let s = NoiseSchedule::from_betas(&[0.19, 0.1]).unwrap();
        let a = ContextAdapter::zero(1);
        let m = ForwardProcess::new(&s, &a).marginal(&[1.0], C, 1).unwrap();
        assert!((m.mean[0] - 0.9).abs() < 1e-15);
        assert!((m.var - 0.19).abs() < 1e-15);
    }

    #[test]
    fn linear_toy_marginal_worked_case() {
        // ᾱ_1 = 0.25 → k_1 = 0.25, mean 0.5 + 0.25·0.2 = 0.55, var 0.75
        let s = NoiseSchedule::from_betas(&[0.75, 0.1]).unwrap();
        let a = ContextAdapter::linear_toy(1, 0.2).unwrap();
        let m = ForwardProcess::new(&s, &a).marginal(&[1.0], C, 1).unwrap();
        assert!((m.mean[0] - 0.55).abs() < 1e-15);
        assert!((m.var - 0.75).abs() < 1e-15);
    }

    #[test]
    fn transition_worked_case() {
        // α_2 = 0.9 and per-step coefficients chosen so b_2 = 0.2·0.2, b_1 = 0.1·0.2:
        // mean = √0.9 + 0.04 − √0.9·0.02 ≈ 0.969709, var 0.1
        let s = NoiseSchedule::from_betas(&[0.2, 0.1, 0.05]).unwrap();
        let coefs = vec![0.0, 0.02 / s.gain(1), 0.04 / s.gain(2), 0.0];
        let a = ContextAdapter::linear_toy_schedule(1, coefs, 3).unwrap();
        let tr = ForwardProcess::new(&s, &a).transition(&[1.0], &[1.0], C, 2).unwrap();
        let expected = 0.9f64.sqrt() + 0.04 - 0.9f64.sqrt() * 0.02;
        assert!((tr.mean[0] - expected).abs() < 1e-14);
        assert!((tr.mean[0] - 0.96971).abs() < 5e-6);
        assert!((tr.var - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_adapter_transition_is_vanilla() {
        let s = ScheduleSpec::cosine(30).build().unwrap();
        let a = ContextAdapter::zero(2);
        let tr = ForwardProcess::new(&s, &a).transition(&[0.3, -0.2], &[1.0, 1.0], C, 9).unwrap();
        assert_eq!(tr.mean, vec![s.alpha(9).sqrt() * 0.3, s.alpha(9).sqrt() * -0.2]);
        assert_eq!(tr.var, s.beta(9));
    }

    #[test]
    fn posterior_worked_case() {
        // α_2 = 0.9, ᾱ_1 = 0.8, ᾱ_2 = 0.72, x₀ = x_t = 1 → mean ≈ 0.997069, var ≈ 0.0714286
        let s = NoiseSchedule::from_betas(&[0.2, 0.1, 0.05]).unwrap();
        let a = ContextAdapter::zero(1);
        let p = ForwardProcess::new(&s, &a).posterior(&[1.0], &[1.0], C, 2).unwrap();
        let mean = 0.8f64.sqrt() * 0.1 / 0.28 + 0.9f64.sqrt() * 0.2 / 0.28;
        assert!((p.mean[0] - mean).abs() < 1e-14);
        assert!((p.mean[0] - 0.997069).abs() < 1e-6);
        assert!((p.var - 0.02 / 0.28).abs() < 1e-15);
    }

    #[test]
    fn marginal_at_t_equals_adapter_free() {
        let s = ScheduleSpec::cosine(30).build().unwrap();
        let mut spec = LearnedAdapterSpec::new(2, 2);
        spec.output_init = OutputInit::Uniform;
        let a = ContextAdapter::learned(spec, 30, &mut seeded(1)).unwrap();
        let fp = ForwardProcess::new(&s, &a);
        let m = fp.marginal(&[1.0, -2.0], C, 30).unwrap();
        let sab = s.alpha_bar(30).sqrt();
        assert_eq!(m.mean, vec![sab * 1.0 + 0.0, sab * -2.0 + 0.0]);
        assert!(fp.marginal(&[1.0, -2.0], C, 0).is_err());
        assert!(fp.marginal(&[1.0, -2.0], C, 31).is_err());
    }

    #[test]
    fn sample_with_zero_noise_is_mean_and_seeded_is_reproducible() {
        let s = ScheduleSpec::cosine(30).build().unwrap();
        let a = ContextAdapter::linear_toy(2, 0.2).unwrap();
        let fp = ForwardProcess::new(&s, &a);
        let x0 = [0.4, -1.1];
        let m = fp.marginal(&x0, C, 12).unwrap();
        assert_eq!(fp.sample_marginal(&x0, C, 12, &mut ZeroNoise).unwrap().x_t, m.mean);
        let a1 = fp.sample_marginal(&x0, C, 12, &mut seeded(3)).unwrap();
        let a2 = fp.sample_marginal(&x0, C, 12, &mut seeded(3)).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn t1_transition_and_posterior_boundaries() {
        let s = ScheduleSpec::cosine(30).build().unwrap();
        let a = ContextAdapter::linear_toy(2, 0.2).unwrap();
        let fp = ForwardProcess::new(&s, &a);
        let x0 = [0.4, -1.1];
        let tr = fp.transition(&x0, &x0, C, 1).unwrap();
        let b1 = a.bias(&s, &x0, C, 1).unwrap();
        for i in 0..2 {
            assert!((tr.mean[i] - (s.alpha(1).sqrt() * x0[i] + b1[i])).abs() < 1e-15);
        }
        assert_eq!(tr.var, s.beta(1));
        let post = fp.posterior(&[0.3, 0.3], &x0, C, 1).unwrap();
        assert_eq!(post.var, 0.0);
        for i in 0..2 {
            assert!((post.mean[i] - x0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_and_bayes_identity_hold_for_learned_adapter() {
        let s = ScheduleSpec::cosine(50).build().unwrap();
        let mut spec = LearnedAdapterSpec::new(2, 2);
        spec.output_init = OutputInit::Uniform;
        let a = ContextAdapter::learned(spec, 50, &mut seeded(8)).unwrap();
        let fp = ForwardProcess::new(&s, &a);
        let x0 = [0.9, -0.4];
        let rep = fp.verify_composition(&x0, C).unwrap();
        assert!(rep.max_mean_deviation < 1e-10, "{rep:?}");
        assert!(rep.max_rel_var_deviation < 1e-10, "{rep:?}");
        let mut rng = seeded(2);
        for t in [2, 10, 49, 50] {
            let xp = fp.marginal(&x0, C, t - 1).unwrap().sample_with(&rng.standard_normal_vec(2));
            let xt = fp.transition(&xp, &x0, C, t).unwrap().sample_with(&rng.standard_normal_vec(2));
            let post_mean = fp.posterior(&xt, &x0, C, t).unwrap().mean;
            let rep = fp.verify_bayes_identity(&x0, C, t, &[(xp, xt.clone()), (post_mean, xt)]).unwrap();
            assert!(rep.max_discrepancy < 1e-8, "t={t} {rep:?}");
        }
        assert!(fp.verify_bayes_identity(&x0, C, 1, &[(vec![0.0; 2], vec![0.0; 2])]).is_err());
    }

    #[test]
    fn faults_break_the_identities() {
        let s = ScheduleSpec::cosine(50).build().unwrap();
        let a = ContextAdapter::linear_toy(2, 0.2).unwrap();
        let x0 = [1.0, -1.0];
        let fp = ForwardProcess::new(&s, &a).with_fault(Fault::DropTransitionPrevBias);
        assert!(fp.verify_composition(&x0, C).unwrap().max_mean_deviation > 1e-3);
        let fp = ForwardProcess::new(&s, &a).with_fault(Fault::DropPosteriorPrevBias);
        let xt = fp.marginal(&x0, C, 25).unwrap().mean;
        let xp = fp.marginal(&x0, C, 24).unwrap().mean;
        assert!(fp.verify_bayes_identity(&x0, C, 25, &[(xp, xt)]).unwrap().max_discrepancy > 1e-3);
    }
}
