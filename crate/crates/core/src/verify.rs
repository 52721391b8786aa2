//! Numerical verification suite and an independent standard-DDPM reference.
//!
//! Each check reports its worst deviation against a fixed tolerance. The
//! suite runs over a grid of schedules and adapters plus one randomized
//! configuration drawn from the suite seed.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{Condition, ContextAdapter, LearnedAdapterSpec, OutputInit};
use crate::denoiser::{Denoiser, DenoiserSpec, KnownX0, X0Predictor};
use crate::error::{Error, Result};
use crate::forward::{Fault, ForwardProcess};
use crate::nn::{grad_check, GradCheckOptions, Mat};
use crate::noise::{seeded, stream, NoiseSource};
use crate::reverse::{verify_ddim_marginals, ReverseProcess};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::toy_oracle::{contextdiff_optimal_error, ddpm_optimal_error, error_sweep, SweepRow, ToyModel};
use crate::training::{
    draw_noise, interior_kl_and_bound, lambda_coefficient, lambda_weight, loss_with_noise, LambdaMode, LossInputs, Model,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    /// Passes when `max_deviation <= tolerance` (NaN fails).
    pub fn within(check: impl Into<String>, max_deviation: f64, tolerance: f64) -> Self {
        CheckReport {
            check: check.into(),
            max_deviation,
            tolerance,
            pass: max_deviation <= tolerance,
        }
    }

    /// Passes when `value >= threshold`; used where a large deviation is the
    /// expected outcome.
    pub fn at_least(check: impl Into<String>, value: f64, threshold: f64) -> Self {
        CheckReport {
            check: check.into(),
            max_deviation: value,
            tolerance: threshold,
            pass: value >= threshold,
        }
    }
}

/// Textbook DDPM/DDIM formulas with no context bias, written out directly.
pub mod vanilla {
    use super::*;

    /// √ᾱ_t·x₀ + √(1 − ᾱ_t)·ε
    pub fn q_sample(s: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        let a = s.alpha_bar(t).sqrt();
        let sd = (1.0 - s.alpha_bar(t)).sqrt();
        x0.iter().zip(eps).map(|(x, e)| a * x + sd * e).collect()
    }

    /// Mean and variance of q(x_{t−1} | x_t, x₀).
    pub fn posterior(s: &NoiseSchedule, x0: &[f64], x_t: &[f64], t: usize) -> (Vec<f64>, f64) {
        let (ab, ab_prev, beta) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t));
        let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let coef_xt = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean = x0.iter().zip(x_t).map(|(a, b)| coef_x0 * a + coef_xt * b).collect();
        (mean, (1.0 - ab_prev) * beta / (1.0 - ab))
    }

    /// Ancestral step from a predicted x̂₀; t = 1 returns x̂₀.
    pub fn ddpm_step(s: &NoiseSchedule, x0_hat: &[f64], x_t: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        if t == 1 {
            return x0_hat.to_vec();
        }
        let (mean, var) = posterior(s, x0_hat, x_t, t);
        let sd = var.sqrt();
        mean.iter().zip(eps).map(|(m, e)| m + sd * e).collect()
    }

    /// DDIM update t → t_prev; `eps` is ignored when eta = 0.
    pub fn ddim_step(
        s: &NoiseSchedule,
        x0_hat: &[f64],
        x_t: &[f64],
        t: usize,
        t_prev: usize,
        eta: f64,
        eps: &[f64],
    ) -> Vec<f64> {
        let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t_prev));
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let out = x0_hat.iter().zip(x_t).map(|(x0, xt)| {
            let eps_hat = (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt();
            ab_prev.sqrt() * x0 + dir * eps_hat
        });
        if eta == 0.0 {
            out.collect()
        } else {
            out.zip(eps).map(|(m, e)| m + sigma * e).collect()
        }
    }

    /// (1/B)·Σ‖f(x_t) − x₀‖² with x_t from [`q_sample`].
    pub fn x0_loss<P: X0Predictor + ?Sized>(
        s: &NoiseSchedule,
        denoiser: &P,
        x0: &Mat,
        classes: &[usize],
        ts: &[usize],
        eps: &Mat,
    ) -> Result<f64> {
        let n = x0.nrows();
        let mut x_t = x0.clone();
        for i in 0..n {
            let row = q_sample(s, &x0.row(i).to_vec(), ts[i], &eps.row(i).to_vec());
            x_t.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        let pred = denoiser.predict_batch(&x_t, classes, ts)?;
        let mut total = 0.0;
        for i in 0..n {
            let sq = pred.row(i).iter().zip(x0.row(i)).map(|(p, x)| (p - x) * (p - x)).fold(0.0, |a, b| a + b);
            total += (1.0 / n as f64) * sq;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    pub seed: u64,
    pub fault: Fault,
    /// Restrict adapter grids to the zero adapter.
    pub zero_only: bool,
    /// Monte-Carlo draws per toy-oracle grid point.
    pub mc_samples: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            fault: Fault::None,
            zero_only: false,
            mc_samples: 1_000_000,
        }
    }
}

pub const DIM: usize = 2;
pub const CLASSES: usize = 3;

/// Tolerances of the suite.
pub mod tol {
    pub const COMPOSITION: f64 = 1e-10;
    pub const BAYES: f64 = 1e-8;
    pub const DDIM_MARGINALS: f64 = 1e-8;
    pub const STANDARD_ERRORS: f64 = 3.0;
    pub const GRADIENT: f64 = 1e-4;
    pub const LAMBDA: f64 = 1e-12;
    pub const MUTATION: f64 = 1e-3;
}

/// Worked λ_t value for α_t = 0.9, ᾱ_{t−1} = 0.8, ᾱ_t = 0.72, k = (0.2, 0.1), C = 0.2.
pub const LAMBDA_WORKED: f64 = 0.3665435195871273;

pub fn schedule_grid() -> Vec<(String, NoiseSchedule)> {
    [
        ("linear-20", ScheduleSpec::linear(20, 1e-4, 0.02)),
        ("linear-1000", ScheduleSpec::linear(1000, 1e-4, 0.02)),
        ("cosine-1000", ScheduleSpec::cosine(1000)),
    ]
    .into_iter()
    .map(|(n, s)| (n.to_string(), s.build().expect("grid schedules are valid")))
    .collect()
}

/// Random learned adapter with a non-zero output layer.
pub fn random_learned(steps: usize, seed: u64) -> Result<ContextAdapter> {
    let mut spec = LearnedAdapterSpec::new(DIM, CLASSES);
    spec.output_init = OutputInit::Uniform;
    ContextAdapter::learned(spec, steps, &mut seeded(seed))
}

pub fn adapter_grid(steps: usize, seed: u64, zero_only: bool) -> Result<Vec<(String, ContextAdapter)>> {
    let mut out = vec![("zero".to_string(), ContextAdapter::zero(DIM))];
    if !zero_only {
        out.push(("linear-0.1".into(), ContextAdapter::linear_toy(DIM, 0.1)?));
        out.push(("linear-0.2".into(), ContextAdapter::linear_toy(DIM, 0.2)?));
        out.push(("learned".into(), random_learned(steps, seed)?));
    }
    Ok(out)
}

fn random_x0<R: Rng>(rng: &mut R) -> Vec<f64> {
    (0..DIM).map(|_| 2.0 * rng.standard_normal()).collect()
}

/// Randomized linear schedule between the grid's extremes.
fn random_schedule<R: Rng>(rng: &mut R) -> Result<(String, NoiseSchedule)> {
    let steps = rng.random_range(10..=200);
    let start = rng.random_range(1e-5..1e-3);
    let end = rng.random_range(0.01..0.05);
    Ok((format!("linear-{steps}-random"), ScheduleSpec::linear(steps, start, end).build()?))
}

fn configurations(opts: &SuiteOptions) -> Result<Vec<(String, NoiseSchedule, String, ContextAdapter)>> {
    let mut rng = stream(opts.seed, 0);
    let mut schedules = schedule_grid();
    schedules.push(random_schedule(&mut rng)?);
    let mut out = Vec::new();
    for (sn, s) in schedules {
        for (an, a) in adapter_grid(s.steps(), opts.seed, opts.zero_only)? {
            out.push((sn.clone(), s.clone(), an, a));
        }
    }
    Ok(out)
}

/// Marginal consistency of the transition kernels.
pub fn check_composition(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let mut rng = stream(opts.seed, 1);
    let mut out = Vec::new();
    for (sn, s, an, a) in configurations(opts)? {
        let x0 = random_x0(&mut rng);
        let c = Condition::new(rng.random_range(0..CLASSES));
        let r = ForwardProcess::new(&s, &a).with_fault(opts.fault).verify_composition(&x0, c)?;
        let dev = r.max_mean_deviation.max(r.max_rel_var_deviation);
        out.push(CheckReport::within(format!("composition/{sn}/{an}"), dev, tol::COMPOSITION));
    }
    Ok(out)
}

/// Bayes identity over `cases` random (t, probe) pairs per configuration,
/// with probes drawn from the forward chain itself.
pub fn check_bayes(opts: &SuiteOptions, cases: usize) -> Result<Vec<CheckReport>> {
    let mut rng = stream(opts.seed, 2);
    let mut out = Vec::new();
    for (sn, s, an, a) in configurations(opts)? {
        let fp = ForwardProcess::new(&s, &a).with_fault(opts.fault);
        let clean = ForwardProcess::new(&s, &a);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let x0 = random_x0(&mut rng);
            let c = Condition::new(rng.random_range(0..CLASSES));
            let t = rng.random_range(2..=s.steps());
            let x_prev = clean.sample_marginal(&x0, c, t - 1, &mut rng)?.x_t;
            let x_t = clean.transition(&x_prev, &x0, c, t)?.sample_with(&rng.standard_normal_vec(DIM));
            let r = fp.verify_bayes_identity(&x0, c, t, &[(x_prev, x_t)])?;
            worst = worst.max(r.max_discrepancy);
        }
        out.push(CheckReport::within(format!("bayes/{sn}/{an}"), worst, tol::BAYES));
    }
    Ok(out)
}

pub fn check_ddim_marginals(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let mut rng = stream(opts.seed, 3);
    let mut out = Vec::new();
    for (sn, s, an, a) in configurations(opts)? {
        let x0 = random_x0(&mut rng);
        let c = Condition::new(rng.random_range(0..CLASSES));
        for eta in [0.25, 0.5, 1.0] {
            let r = verify_ddim_marginals(&s, &a, &x0, c, eta, opts.fault)?;
            let dev = r.max_mean_deviation.max(r.max_rel_var_deviation);
            out.push(CheckReport::within(format!("ddim-marginals/{sn}/{an}/eta-{eta}"), dev, tol::DDIM_MARGINALS));
        }
    }
    Ok(out)
}

pub const SWEEP_ALPHA_BARS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const SWEEP_RS: [f64; 5] = [0.0, 0.1, 0.2, 0.5, 1.0];

/// Single-class d = 2, σ = 1 model used by the oracle checks.
pub fn sweep_model() -> ToyModel {
    ToyModel::new(vec![vec![1.0, -1.0]], vec![1.0]).expect("valid model")
}

pub fn toy_sweep(opts: &SuiteOptions) -> Result<Vec<SweepRow>> {
    error_sweep(&sweep_model(), 0, &SWEEP_ALPHA_BARS, &SWEEP_RS, opts.mc_samples, opts.seed)
}

/// MC oracle agreement and strict error reduction on the sweep grid.
pub fn check_toy_oracle(rows: &[SweepRow]) -> Vec<CheckReport> {
    let mut out = Vec::new();
    let mut worst_z = 0.0f64;
    let mut worst_reduction = f64::NEG_INFINITY;
    for row in rows {
        let exact = if row.r == 0.0 { row.ddpm } else { row.contextdiff };
        worst_z = worst_z.max((row.mc_mean - exact).abs() / row.mc_std_error);
        if row.r == 0.0 {
            worst_z = worst_z.max((row.mc_mean - row.contextdiff).abs() / row.mc_std_error);
        } else {
            // contextdiff − ddpm must be strictly negative
            worst_reduction = worst_reduction.max(row.contextdiff - row.ddpm);
        }
    }
    out.push(CheckReport::within("toy-oracle/mc-agreement-z", worst_z, tol::STANDARD_ERRORS));
    let mut reduction = CheckReport::within("toy-oracle/strict-reduction", worst_reduction, 0.0);
    reduction.pass = worst_reduction < 0.0;
    out.push(reduction);
    let worked = contextdiff_optimal_error(1.0, 0.5, 0.2, 2).and_then(|c| Ok((c, ddpm_optimal_error(1.0, 0.5, 2)?)));
    let dev = match worked {
        Ok((c, d)) => (c - 0.7559477710916341).abs().max((d - 1.0).abs()),
        Err(_) => f64::INFINITY,
    };
    out.push(CheckReport::within("toy-oracle/worked-values", dev, 1e-15));
    out
}

/// Largest |a − b| over two equal-length vectors; infinite if any bit pattern
/// differs while the values compare equal (signed zeros).
fn bitwise_gap(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.to_bits() == y.to_bits() {
                0.0
            } else if x == y {
                f64::MIN_POSITIVE
            } else {
                (x - y).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Zero-adapter operations against [`vanilla`] under shared noise; every
/// deviation must be exactly zero.
pub fn check_vanilla_reduction(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let mut rng = stream(opts.seed, 4);
    let zero = ContextAdapter::zero(DIM);
    let mut gaps = [0.0f64; 5];
    let mut schedules = schedule_grid();
    schedules.push(random_schedule(&mut rng)?);
    for (_, s) in &schedules {
        let fp = ForwardProcess::new(s, &zero);
        let den = Denoiser::new(DenoiserSpec::new(DIM, CLASSES), s, &mut rng)?;
        let rp = ReverseProcess::new(s, &zero, &den);
        for _ in 0..50 {
            let x0 = random_x0(&mut rng);
            let c = Condition::new(rng.random_range(0..CLASSES));
            let t = rng.random_range(1..=s.steps());
            let eps = rng.standard_normal_vec(DIM);
            let x_t = fp.sample_marginal(&x0, c, t, &mut eps.clone().into_iter().as_noise())?.x_t;
            gaps[0] = gaps[0].max(bitwise_gap(&x_t, &vanilla::q_sample(s, &x0, t, &eps)));

            let x0_hat = den.predict(&x_t, c, t)?;
            let step_eps = rng.standard_normal_vec(DIM);
            if t >= 2 {
                let q = fp.posterior(&x_t, &x0, c, t)?;
                let (vm, vv) = vanilla::posterior(s, &x0, &x_t, t);
                gaps[1] = gaps[1].max(bitwise_gap(&q.mean, &vm)).max(bitwise_gap(&[q.var], &[vv]));
            }
            let ours = rp.ddpm_step(&x_t, c, t, &mut step_eps.clone().into_iter().as_noise())?;
            gaps[2] = gaps[2].max(bitwise_gap(&ours, &vanilla::ddpm_step(s, &x0_hat, &x_t, t, &step_eps)));

            if t >= 2 {
                let t_prev = rng.random_range(1..t);
                for eta in [0.0, 0.5, 1.0] {
                    let ours = rp.ddim_step(&x_t, c, t, t_prev, eta, &mut step_eps.clone().into_iter().as_noise())?;
                    let theirs = vanilla::ddim_step(s, &x0_hat, &x_t, t, t_prev, eta, &step_eps);
                    gaps[3] = gaps[3].max(bitwise_gap(&ours, &theirs));
                }
            }
        }
        let model = Model {
            schedule: s.clone(),
            adapter: zero.clone(),
            denoiser: den,
        };
        let b = 16;
        let x0 = Mat::from_shape_fn((b, DIM), |_| 2.0 * rng.standard_normal());
        let classes: Vec<usize> = (0..b).map(|i| i % CLASSES).collect();
        let (ts, eps) = draw_noise(s, b, DIM, &mut rng);
        let ones = vec![1.0; b];
        let inputs = LossInputs {
            x0: &x0,
            classes: &classes,
            ts: &ts,
            eps: &eps,
            lambdas: &ones,
        };
        let ours = loss_with_noise(&model, inputs, true)?.loss;
        let theirs = vanilla::x0_loss(s, &model.denoiser, &x0, &classes, &ts, &eps)?;
        gaps[4] = gaps[4].max(bitwise_gap(&[ours], &[theirs]));
    }
    Ok(["forward-sample", "posterior", "ddpm-step", "ddim-step", "training-loss"]
        .iter()
        .zip(gaps)
        .map(|(n, g)| CheckReport::within(format!("vanilla-reduction/{n}"), g, 0.0))
        .collect())
}

/// Replays a fixed list of standard normals.
pub struct Replay<I: Iterator<Item = f64>>(pub I);

impl<I: Iterator<Item = f64>> NoiseSource for Replay<I> {
    fn standard_normal(&mut self) -> f64 {
        self.0.next().expect("replayed noise exhausted")
    }
}

trait AsNoise: Iterator<Item = f64> + Sized {
    fn as_noise(self) -> Replay<Self> {
        Replay(self)
    }
}

impl<I: Iterator<Item = f64>> AsNoise for I {}

/// Finite differences of the joint (θ, φ) loss over `seeds` random instances.
pub fn check_gradients(seeds: u64, base_seed: u64) -> Result<Vec<CheckReport>> {
    let mut worst = 0.0f64;
    for k in 0..seeds {
        let seed = base_seed.wrapping_add(k);
        let mut rng = stream(seed, 5);
        let s = ScheduleSpec::cosine(rng.random_range(5..=50)).build()?;
        let mut dspec = DenoiserSpec::new(DIM, CLASSES);
        dspec.hidden = 12;
        dspec.precondition = rng.random_bool(0.5);
        let denoiser = Denoiser::new(dspec, &s, &mut rng)?;
        let mut aspec = LearnedAdapterSpec::new(DIM, CLASSES);
        aspec.hidden = 8;
        aspec.output_init = OutputInit::Uniform;
        let adapter = ContextAdapter::learned(aspec, s.steps(), &mut rng)?;
        let mut model = Model {
            schedule: s,
            adapter,
            denoiser,
        };
        let b = 6;
        let x0 = Mat::from_shape_fn((b, DIM), |_| 2.0 * rng.standard_normal());
        let classes: Vec<usize> = (0..b).map(|_| rng.random_range(0..CLASSES)).collect();
        let (ts, eps) = draw_noise(&model.schedule, b, DIM, &mut rng);
        let lambdas: Vec<f64> = (0..b).map(|_| rng.random_range(0.5..2.0)).collect();
        let inputs = LossInputs {
            x0: &x0,
            classes: &classes,
            ts: &ts,
            eps: &eps,
            lambdas: &lambdas,
        };
        let out = loss_with_noise(&model, inputs, true)?;
        let n_theta = model.denoiser.params().count();
        let mut point = model.denoiser.params().flat();
        let mut analytic = out.theta.flat();
        point.extend(model.adapter.params().expect("learned").flat());
        analytic.extend(out.phi.expect("trainable adapter").flat());
        let report = grad_check(
            &point,
            &analytic,
            |p| {
                model.denoiser.params_mut().set_flat(&p[..n_theta])?;
                model.adapter.params_mut().expect("learned").set_flat(&p[n_theta..])?;
                Ok(loss_with_noise(&model, inputs, true)?.loss)
            },
            GradCheckOptions {
                seed,
                ..Default::default()
            },
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(vec![CheckReport::within("gradients/joint-loss", worst, tol::GRADIENT)])
}

/// Worked λ_t value and the KL upper bound on the linear adapter.
pub fn check_lambda(opts: &SuiteOptions, states: usize) -> Result<Vec<CheckReport>> {
    let worked = lambda_coefficient(0.9, 0.8, 0.72, 0.2, 0.1, 0.2, 0.2);
    let mut out = vec![CheckReport::within("lambda/worked-value", (worked - LAMBDA_WORKED).abs(), tol::LAMBDA)];
    let mut rng = stream(opts.seed, 6);
    // max over states of KL/bound − 1; must stay ≤ 0 up to rounding
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..states {
        let (_, s) = random_schedule(&mut rng)?;
        let r = rng.random_range(0.0..1.0);
        let a = ContextAdapter::linear_toy(DIM, r)?;
        let c_table = vec![r; s.steps() + 1];
        let t = rng.random_range(2..=s.steps());
        let lam = lambda_weight(LambdaMode::Lipschitz, &s, t, Some(&c_table))?;
        let x0 = random_x0(&mut rng);
        let x0_hat: Vec<f64> = x0.iter().map(|v| v + rng.standard_normal()).collect();
        let x_t = rng.standard_normal_vec(DIM);
        let (kl, bound) = interior_kl_and_bound(&s, &a, &x0, &x0_hat, &x_t, Condition::new(0), t, lam)?;
        worst = worst.max(kl / bound - 1.0);
    }
    out.push(CheckReport::within("lambda/kl-upper-bound", worst, 1e-12));
    Ok(out)
}

/// Fault sensitivity: each injected fault must push the matching check to a
/// deviation of at least 1e-3 on a linear adapter with k_t ≥ 0.1.
pub fn check_mutations(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let s = ScheduleSpec::cosine(1000).build()?;
    let a = ContextAdapter::linear_toy(DIM, 0.2)?;
    let mut rng = stream(opts.seed, 7);
    let x0 = random_x0(&mut rng);
    let c = Condition::new(0);
    let transition = ForwardProcess::new(&s, &a)
        .with_fault(Fault::DropTransitionPrevBias)
        .verify_composition(&x0, c)?;
    let t = (2..s.steps()).find(|&t| s.gain(t) >= 0.1 && s.gain(t - 1) >= 0.1).expect("gain exceeds 0.1");
    let fp = ForwardProcess::new(&s, &a);
    let x_prev = fp.sample_marginal(&x0, c, t - 1, &mut rng)?.x_t;
    let x_t = fp.transition(&x_prev, &x0, c, t)?.sample_with(&rng.standard_normal_vec(DIM));
    let bayes = |fault| -> Result<f64> {
        Ok(ForwardProcess::new(&s, &a)
            .with_fault(fault)
            .verify_bayes_identity(&x0, c, t, &[(x_prev.clone(), x_t.clone())])?
            .max_discrepancy)
    };
    Ok(vec![
        CheckReport::at_least(
            "mutation/drop-transition-prev-bias/composition",
            transition.max_mean_deviation,
            tol::MUTATION,
        ),
        CheckReport::at_least(
            "mutation/drop-transition-prev-bias/bayes",
            bayes(Fault::DropTransitionPrevBias)?,
            tol::MUTATION,
        ),
        CheckReport::at_least(
            "mutation/drop-posterior-prev-bias/bayes",
            bayes(Fault::DropPosteriorPrevBias)?,
            tol::MUTATION,
        ),
    ])
}

/// Perfect-denoiser consistency of the reverse kernel on every configuration.
pub fn check_perfect_denoiser(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let mut rng = stream(opts.seed, 8);
    let mut out = Vec::new();
    for (sn, s, an, a) in configurations(opts)? {
        let x0 = random_x0(&mut rng);
        let known = KnownX0::single(&x0);
        let c = Condition::new(rng.random_range(0..CLASSES));
        let rp = ReverseProcess::new(&s, &a, &known).with_fault(opts.fault);
        let fp = ForwardProcess::new(&s, &a);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let t = rng.random_range(2..=s.steps());
            let x_t = fp.sample_marginal(&x0, c, t, &mut rng)?.x_t;
            let p = rp.ddpm_kernel(&x_t, &x0, c, t)?;
            let q = fp.posterior(&x_t, &x0, c, t)?;
            worst = worst.max(bitwise_gap(&p.mean, &q.mean)).max(bitwise_gap(&[p.var], &[q.var]));
        }
        out.push(CheckReport::within(format!("perfect-denoiser/{sn}/{an}"), worst, 0.0));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub fault: Fault,
    pub zero_only: bool,
    pub checks: Vec<CheckReport>,
    pub pass: bool,
}

/// Every check; `pass` is true iff all of them pass.
pub fn run_suite(opts: &SuiteOptions) -> Result<(SuiteReport, Vec<SweepRow>)> {
    if opts.mc_samples == 0 {
        return Err(Error::invalid("mc_samples must be >= 1"));
    }
    let mut checks = Vec::new();
    checks.extend(check_composition(opts)?);
    checks.extend(check_bayes(opts, 1000)?);
    checks.extend(check_ddim_marginals(opts)?);
    checks.extend(check_perfect_denoiser(opts)?);
    checks.extend(check_vanilla_reduction(opts)?);
    let sweep = toy_sweep(opts)?;
    checks.extend(check_toy_oracle(&sweep));
    checks.extend(check_gradients(10, opts.seed)?);
    checks.extend(check_lambda(opts, 1000)?);
    if !opts.zero_only {
        checks.extend(check_mutations(opts)?);
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok((
        SuiteReport {
            seed: opts.seed,
            fault: opts.fault,
            zero_only: opts.zero_only,
            checks,
            pass,
        },
        sweep,
    ))
}

/// CSV: alpha_bar, r, ddpm, contextdiff, mc_mean, mc_std_error.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let e = |e: csv::Error| Error::invalid(format!("sweep write: {e}"));
    w.write_record(["alpha_bar", "r", "ddpm", "contextdiff", "mc_mean", "mc_std_error"]).map_err(e)?;
    for r in rows {
        w.write_record([r.alpha_bar, r.r, r.ddpm, r.contextdiff, r.mc_mean, r.mc_std_error].map(|v| format!("{v:?}")))
            .map_err(e)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("sweep write: {e}")))
}
