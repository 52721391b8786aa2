//! Context-aware generation: DDPM and DDIM steps with the adapter applied to
//! the predicted x̂₀, full sampling chains, and the DDIM marginal check.

use std::io::Write;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::adapter::{Condition, ContextAdapter};
use crate::denoiser::X0Predictor;
use crate::error::{Error, Result};
use crate::forward::{posterior_coefs, posterior_mean, Fault};
use crate::gaussian::GaussianParams;
use crate::nn::Mat;
use crate::noise::{stream, NoiseSource};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    #[default]
    Ddpm,
    Ddim,
}

impl SamplerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerMode::Ddpm => "ddpm",
            SamplerMode::Ddim => "ddim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default)]
    pub mode: SamplerMode,
    /// DDIM timestep stride; 1 walks every step.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Optional per-coordinate [lo, hi] box applied to x̂₀.
    #[serde(default)]
    pub clamp: Option<(Vec<f64>, Vec<f64>)>,
}

fn default_stride() -> usize {
    1
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SamplerMode::Ddpm,
            stride: 1,
            eta: 0.0,
            seed: 0,
            clamp: None,
        }
    }
}

impl SamplerConfig {
    pub fn ddpm(seed: u64) -> Self {
        SamplerConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn ddim(stride: usize, eta: f64, seed: u64) -> Self {
        SamplerConfig {
            mode: SamplerMode::Ddim,
            stride,
            eta,
            seed,
            clamp: None,
        }
    }

    /// Descending visit order, always starting at T and ending at 1.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(Error::invalid("empty timestep sequence"));
        }
        let stride = match self.mode {
            SamplerMode::Ddpm => 1,
            SamplerMode::Ddim => self.stride,
        };
        if stride == 0 {
            return Err(Error::invalid("DDIM stride must be >= 1"));
        }
        let mut seq: Vec<usize> = (0..)
            .map(|i| steps as i64 - (i * stride) as i64)
            .take_while(|&t| t > 1)
            .map(|t| t as usize)
            .collect();
        seq.push(1);
        Ok(seq)
    }
}

/// DDIM noise scale σ_t for the (t → t_prev) jump.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// DDIM kernel N(mean, σ²) from x̂₀ and precomputed biases b_t(x̂₀), b_{t_prev}(x̂₀).
#[allow(clippy::too_many_arguments)]
fn ddim_kernel_from(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    x0_hat: &[f64],
    b_t: &[f64],
    b_prev: &[f64],
    t: usize,
    t_prev: usize,
    sigma2: f64,
) -> Result<GaussianParams> {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let room = 1.0 - ab_prev - sigma2;
    if room < -1e-15 {
        return Err(Error::invalid(format!(
            "sigma^2 = {sigma2} exceeds 1 - alpha_bar_prev = {}",
            1.0 - ab_prev
        )));
    }
    let dir = room.max(0.0).sqrt();
    let sab = ab.sqrt();
    let sab_prev = ab_prev.sqrt();
    let denom = (1.0 - ab).sqrt();
    let shift = dir / denom;
    let mean = (0..x_t.len())
        .map(|i| {
            let eps = (x_t[i] - sab * x0_hat[i]) / denom;
            let guided = sab_prev * x0_hat[i] + dir * eps;
            guided - b_t[i] * shift + b_prev[i]
        })
        .collect();
    Ok(GaussianParams::new(mean, sigma2))
}

fn check_jump(schedule: &NoiseSchedule, t: usize, t_prev: usize) -> Result<()> {
    schedule.check_t(t, 1)?;
    if t_prev == 0 || t_prev >= t {
        return Err(Error::invalid(format!("need 1 <= t_prev < t, got t = {t}, t_prev = {t_prev}")));
    }
    Ok(())
}

pub struct ReverseProcess<'a, P: X0Predictor + ?Sized> {
    pub schedule: &'a NoiseSchedule,
    pub adapter: &'a ContextAdapter,
    pub denoiser: &'a P,
    pub fault: Fault,
}

impl<'a, P: X0Predictor + ?Sized> ReverseProcess<'a, P> {
    pub fn new(schedule: &'a NoiseSchedule, adapter: &'a ContextAdapter, denoiser: &'a P) -> Self {
        ReverseProcess {
            schedule,
            adapter,
            denoiser,
            fault: Fault::None,
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = fault;
        self
    }

    /// p(x_{t−1} | x_t, c) for t ≥ 2: the forward posterior with x̂₀ inserted.
    pub fn ddpm_kernel(&self, x_t: &[f64], x0_hat: &[f64], c: Condition, t: usize) -> Result<GaussianParams> {
        self.schedule.check_t(t, 2)?;
        let b_t = self.adapter.bias(self.schedule, x0_hat, c, t)?;
        let b_prev = self.adapter.bias(self.schedule, x0_hat, c, t - 1)?;
        Ok(self.ddpm_kernel_from(x_t, x0_hat, &b_t, &b_prev, t))
    }

    fn ddpm_kernel_from(&self, x_t: &[f64], x0_hat: &[f64], b_t: &[f64], b_prev: &[f64], t: usize) -> GaussianParams {
        let (c1, c2, var) = posterior_coefs(self.schedule, t);
        GaussianParams::new(posterior_mean(c1, c2, x0_hat, x_t, b_t, b_prev, self.fault), var)
    }

    /// One ancestral step; at t = 1 returns x̂₀ without noise.
    pub fn ddpm_step<N: NoiseSource + ?Sized>(
        &self,
        x_t: &[f64],
        c: Condition,
        t: usize,
        noise: &mut N,
    ) -> Result<Vec<f64>> {
        self.schedule.check_t(t, 1)?;
        let x0_hat = self.denoiser.predict(x_t, c, t)?;
        if t == 1 {
            return Ok(x0_hat);
        }
        let k = self.ddpm_kernel(x_t, &x0_hat, c, t)?;
        Ok(k.sample_with(&noise.standard_normal_vec(x_t.len())))
    }

    /// DDIM kernel for the jump t → t_prev.
    pub fn ddim_kernel(
        &self,
        x_t: &[f64],
        x0_hat: &[f64],
        c: Condition,
        t: usize,
        t_prev: usize,
        eta: f64,
    ) -> Result<GaussianParams> {
        check_jump(self.schedule, t, t_prev)?;
        if eta < 0.0 {
            return Err(Error::invalid("eta must be >= 0"));
        }
        let b_t = self.adapter.bias(self.schedule, x0_hat, c, t)?;
        let b_prev = self.adapter.bias(self.schedule, x0_hat, c, t_prev)?;
        let sigma = ddim_sigma(self.schedule, t, t_prev, eta);
        ddim_kernel_from(self.schedule, x_t, x0_hat, &b_t, &b_prev, t, t_prev, sigma * sigma)
    }

    /// One DDIM step; draws no noise when eta = 0.
    #[allow(clippy::too_many_arguments)]
    pub fn ddim_step<N: NoiseSource + ?Sized>(
        &self,
        x_t: &[f64],
        c: Condition,
        t: usize,
        t_prev: usize,
        eta: f64,
        noise: &mut N,
    ) -> Result<Vec<f64>> {
        check_jump(self.schedule, t, t_prev)?;
        let x0_hat = self.denoiser.predict(x_t, c, t)?;
        let k = self.ddim_kernel(x_t, &x0_hat, c, t, t_prev, eta)?;
        Ok(add_noise(k, noise))
    }

    /// Draws `n` samples of condition `c`.
    pub fn sample_chain(&self, n: usize, c: Condition, config: &SamplerConfig) -> Result<SampleSet> {
        self.sample_chain_classes(&vec![c.class; n], config)
    }

    /// One chain per entry of `classes`. Chain `i` draws x_T and all step
    /// noise from its own stream `i` under `config.seed`.
    pub fn sample_chain_classes(&self, classes: &[usize], config: &SamplerConfig) -> Result<SampleSet> {
        let n = classes.len();
        let d = self.denoiser.dim();
        let seq = config.timesteps(self.schedule.steps())?;
        let mut rngs: Vec<_> = (0..n as u64).map(|i| stream(config.seed, i)).collect();
        let mut x = Array2::zeros((n, d));
        for (mut row, rng) in x.rows_mut().into_iter().zip(&mut rngs) {
            for v in row.iter_mut() {
                *v = rng.standard_normal();
            }
        }
        if let Some((lo, hi)) = &config.clamp {
            if lo.len() != d || hi.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: lo.len().min(hi.len()),
                });
            }
        }
        for (pos, &t) in seq.iter().enumerate() {
            let ts = vec![t; n];
            let mut x0_hat = self.denoiser.predict_batch(&x, classes, &ts)?;
            if let Some((lo, hi)) = &config.clamp {
                for mut row in x0_hat.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = v.clamp(lo[j], hi[j]);
                    }
                }
            }
            if t == 1 {
                x = x0_hat;
                break;
            }
            let t_prev = match config.mode {
                SamplerMode::Ddpm => t - 1,
                SamplerMode::Ddim => seq[pos + 1],
            };
            let b_t = self.adapter.bias_batch(self.schedule, &x0_hat, classes, &ts)?;
            let b_prev = self.adapter.bias_batch(self.schedule, &x0_hat, classes, &vec![t_prev; n])?;
            let sigma = ddim_sigma(self.schedule, t, t_prev, config.eta);
            let mut next = Array2::zeros((n, d));
            for i in 0..n {
                let (xt, xh) = (row_vec(x.row(i)), row_vec(x0_hat.row(i)));
                let (bt, bp) = (row_vec(b_t.row(i)), row_vec(b_prev.row(i)));
                let kernel = match config.mode {
                    SamplerMode::Ddpm => self.ddpm_kernel_from(&xt, &xh, &bt, &bp, t),
                    SamplerMode::Ddim => {
                        ddim_kernel_from(self.schedule, &xt, &xh, &bt, &bp, t, t_prev, sigma * sigma)?
                    }
                };
                let out = add_noise(kernel, &mut rngs[i]);
                next.row_mut(i).assign(&ndarray::ArrayView1::from(&out));
            }
            x = next;
        }
        Ok(SampleSet {
            samples: x,
            classes: classes.to_vec(),
            seed: config.seed,
            mode: config.mode,
        })
    }
}

fn row_vec(r: ArrayView1<f64>) -> Vec<f64> {
    r.to_vec()
}

fn add_noise<N: NoiseSource + ?Sized>(k: GaussianParams, noise: &mut N) -> Vec<f64> {
    if k.var == 0.0 {
        return k.mean;
    }
    let eps = noise.standard_normal_vec(k.dim());
    k.sample_with(&eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Mat,
    pub classes: Vec<usize>,
    pub seed: u64,
    pub mode: SamplerMode,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Mean of the samples of one class, or `None` if it has none.
    pub fn class_mean(&self, class: usize) -> Option<Vec<f64>> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.classes[i] == class).collect();
        if rows.is_empty() {
            return None;
        }
        let mut mean = vec![0.0; self.samples.ncols()];
        for &i in &rows {
            for (m, v) in mean.iter_mut().zip(self.samples.row(i)) {
                *m += v;
            }
        }
        Some(mean.into_iter().map(|m| m / rows.len() as f64).collect())
    }

    /// CSV with columns x_1..x_d, class, seed, sampler.
    pub fn write_csv<W: Write>(&self, dim: usize, out: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(out);
        let header: Vec<String> = (1..=dim)
            .map(|j| format!("x_{j}"))
            .chain(["class".into(), "seed".into(), "sampler".into()])
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (i, class) in self.classes.iter().enumerate() {
            for v in self.samples.row(i) {
                write!(w, "{v:?},")?;
            }
            writeln!(w, "{class},{},{}", self.seed, self.mode.as_str())?;
        }
        w.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DdimMarginalReport {
    pub max_mean_deviation: f64,
    pub max_rel_var_deviation: f64,
}

/// Propagates the DDIM posterior family (built from the true x₀) backward from
/// the marginal at T and compares every intermediate marginal with
/// q(x_{t−1} | x₀, c).
pub fn verify_ddim_marginals(
    schedule: &NoiseSchedule,
    adapter: &ContextAdapter,
    x0: &[f64],
    c: Condition,
    eta: f64,
    fault: Fault,
) -> Result<DdimMarginalReport> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("eta must be > 0, got {eta}")));
    }
    verify_ddim_marginals_with(schedule, adapter, x0, c, fault, |t| {
        let s = ddim_sigma(schedule, t, t - 1, eta);
        s * s
    })
}

/// As [`verify_ddim_marginals`] with an explicit σ²(t) for the t → t−1 kernel.
pub fn verify_ddim_marginals_with(
    schedule: &NoiseSchedule,
    adapter: &ContextAdapter,
    x0: &[f64],
    c: Condition,
    fault: Fault,
    sigma2: impl Fn(usize) -> f64,
) -> Result<DdimMarginalReport> {
    let fp = crate::forward::ForwardProcess::new(schedule, adapter).with_fault(fault);
    let steps = schedule.steps();
    let start = fp.marginal(x0, c, steps)?;
    let mut mean = start.mean;
    let mut var = start.var;
    let mut report = DdimMarginalReport {
        max_mean_deviation: 0.0,
        max_rel_var_deviation: 0.0,
    };
    for t in (2..=steps).rev() {
        let s2 = sigma2(t);
        let b_t = adapter.bias(schedule, x0, c, t)?;
        let mut b_prev = adapter.bias(schedule, x0, c, t - 1)?;
        if fault == Fault::DropPosteriorPrevBias {
            b_prev.iter_mut().for_each(|b| *b = 0.0);
        }
        // The kernel is affine in x_t with slope √(1 − ᾱ_{t−1} − σ²)/√(1 − ᾱ_t).
        let kernel = ddim_kernel_from(schedule, &mean, x0, &b_t, &b_prev, t, t - 1, s2)?;
        let slope = (1.0 - schedule.alpha_bar(t - 1) - s2).max(0.0).sqrt() / (1.0 - schedule.alpha_bar(t)).sqrt();
        mean = kernel.mean;
        var = slope * slope * var + s2;
        let target = fp.marginal(x0, c, t - 1)?;
        for (a, b) in mean.iter().zip(&target.mean) {
            report.max_mean_deviation = report.max_mean_deviation.max((a - b).abs());
        }
        report.max_rel_var_deviation = report.max_rel_var_deviation.max((var - target.var).abs() / target.var);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{LearnedAdapterSpec, OutputInit};
    use crate::denoiser::KnownX0;
    use crate::forward::ForwardProcess;
    use crate::noise::{seeded, ZeroNoise};
    use crate::schedule::ScheduleSpec;

    const C: Condition = Condition { class: 1 };

    fn learned(steps: usize, seed: u64) -> ContextAdapter {
        let mut spec = LearnedAdapterSpec::new(2, 2);
        spec.output_init = OutputInit::Uniform;
        ContextAdapter::learned(spec, steps, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn timestep_sequences() {
        assert_eq!(SamplerConfig::ddpm(0).timesteps(4).unwrap(), vec![4, 3, 2, 1]);
        assert_eq!(SamplerConfig::ddim(10, 0.0, 0).timesteps(100).unwrap().len(), 11);
        assert_eq!(SamplerConfig::ddim(3, 0.0, 0).timesteps(10).unwrap(), vec![10, 7, 4, 1]);
        assert_eq!(SamplerConfig::ddim(4, 0.0, 0).timesteps(10).unwrap(), vec![10, 6, 2, 1]);
        assert!(SamplerConfig::ddim(0, 0.0, 0).timesteps(10).is_err());
        assert!(SamplerConfig::ddpm(0).timesteps(0).is_err());
    }

    #[test]
    fn perfect_denoiser_kernel_equals_posterior() {
        let s = ScheduleSpec::cosine(40).build().unwrap();
        let a = learned(40, 3);
        let x0 = [0.7, -1.2];
        let known = KnownX0::single(&x0);
        let rp = ReverseProcess::new(&s, &a, &known);
        let fp = ForwardProcess::new(&s, &a);
        for t in [2, 17, 40] {
            let x_t = fp.sample_marginal(&x0, C, t, &mut seeded(t as u64)).unwrap().x_t;
            let x0_hat = known.predict(&x_t, C, t).unwrap();
            assert_eq!(rp.ddpm_kernel(&x_t, &x0_hat, C, t).unwrap(), fp.posterior(&x_t, &x0, C, t).unwrap());
        }
    }

    #[test]
    fn scalar_step_worked_case() {
        let s = NoiseSchedule::from_betas(&[0.2, 0.1, 0.05]).unwrap();
        let a = ContextAdapter::zero(1);
        let known = KnownX0::single(&[1.0]);
        let k = ReverseProcess::new(&s, &a, &known).ddpm_kernel(&[1.0], &[1.0], C, 2).unwrap();
        assert!((k.mean[0] - 0.997069).abs() < 1e-6);
        assert!((k.var - 0.0714286).abs() < 1e-7);
    }

    #[test]
    fn final_step_emits_prediction() {
        let s = ScheduleSpec::cosine(10).build().unwrap();
        let a = learned(10, 1);
        let known = KnownX0::single(&[0.25, -0.5]);
        let rp = ReverseProcess::new(&s, &a, &known);
        assert_eq!(rp.ddpm_step(&[3.0, 3.0], C, 1, &mut seeded(0)).unwrap(), vec![0.25, -0.5]);
        assert!(rp.ddpm_step(&[3.0, 3.0], C, 11, &mut seeded(0)).is_err());
    }

    #[test]
    fn deterministic_ddim_on_noise_free_input() {
        let s = ScheduleSpec::cosine(50).build().unwrap();
        let a = ContextAdapter::zero(2);
        let x0 = [1.5, -0.5];
        let known = KnownX0::single(&x0);
        let rp = ReverseProcess::new(&s, &a, &known);
        let sab = s.alpha_bar(30).sqrt();
        let x_t: Vec<f64> = x0.iter().map(|v| sab * v).collect();
        let out = rp.ddim_step(&x_t, C, 30, 12, 0.0, &mut ZeroNoise).unwrap();
        for (o, v) in out.iter().zip(&x0) {
            assert!((o - s.alpha_bar(12).sqrt() * v).abs() < 1e-14);
        }
    }

    #[test]
    fn ddim_argument_errors() {
        let s = ScheduleSpec::cosine(20).build().unwrap();
        let a = ContextAdapter::zero(2);
        let known = KnownX0::single(&[0.0, 0.0]);
        let rp = ReverseProcess::new(&s, &a, &known);
        let x = [0.1, 0.2];
        assert!(rp.ddim_step(&x, C, 5, 5, 0.0, &mut ZeroNoise).is_err());
        assert!(rp.ddim_step(&x, C, 5, 0, 0.0, &mut ZeroNoise).is_err());
        assert!(rp.ddim_step(&x, C, 5, 3, 3.0, &mut ZeroNoise).is_err());
    }

    #[test]
    fn ddim_eta_one_matches_ddpm_kernel() {
        let s = ScheduleSpec::cosine(60).build().unwrap();
        let a = learned(60, 5);
        let known = KnownX0::single(&[0.3, 0.8]);
        let rp = ReverseProcess::new(&s, &a, &known);
        for t in 2..=60 {
            let x_t = [0.5 - t as f64 * 0.01, 0.2];
            let x0_hat = [0.3, 0.8];
            let p = rp.ddpm_kernel(&x_t, &x0_hat, C, t).unwrap();
            let q = rp.ddim_kernel(&x_t, &x0_hat, C, t, t - 1, 1.0).unwrap();
            assert!((p.var - q.var).abs() < 1e-10);
            for (u, v) in p.mean.iter().zip(&q.mean) {
                assert!((u - v).abs() < 1e-10, "t={t}");
            }
        }
    }

    #[test]
    fn ddim_marginals_preserved() {
        let s = ScheduleSpec::cosine(100).build().unwrap();
        let x0 = [1.2, -0.7];
        for a in [ContextAdapter::zero(2), ContextAdapter::linear_toy(2, 0.2).unwrap(), learned(100, 2)] {
            for eta in [0.25, 0.5, 1.0] {
                let r = verify_ddim_marginals(&s, &a, &x0, C, eta, Fault::None).unwrap();
                assert!(r.max_mean_deviation < 1e-8 && r.max_rel_var_deviation < 1e-8, "{r:?}");
            }
        }
        assert!(verify_ddim_marginals(&s, &ContextAdapter::zero(2), &x0, C, 0.0, Fault::None).is_err());
    }

    #[test]
    fn maximal_noise_edge() {
        // σ² = 1 − ᾱ_{t−1}: the kernel ignores x_t and equals the marginal at t−1.
        let s = ScheduleSpec::cosine(30).build().unwrap();
        let a = ContextAdapter::linear_toy(2, 0.2).unwrap();
        let r = verify_ddim_marginals_with(&s, &a, &[0.5, 1.0], C, Fault::None, |t| 1.0 - s.alpha_bar(t - 1)).unwrap();
        assert!(r.max_mean_deviation < 1e-12 && r.max_rel_var_deviation < 1e-12, "{r:?}");
    }

    #[test]
    fn chains_are_reproducible() {
        let s = ScheduleSpec::cosine(20).build().unwrap();
        let a = learned(20, 7);
        let known = KnownX0::single(&[1.0, 2.0]);
        let rp = ReverseProcess::new(&s, &a, &known);
        for cfg in [SamplerConfig::ddpm(4), SamplerConfig::ddim(5, 0.5, 4)] {
            let x = rp.sample_chain(16, C, &cfg).unwrap();
            assert_eq!(x, rp.sample_chain(16, C, &cfg).unwrap());
            // perfect prediction → the final emission is exact
            assert!(x.samples.rows().into_iter().all(|r| r.to_vec() == vec![1.0, 2.0]));
        }
    }

    #[test]
    fn csv_layout() {
        let set = SampleSet {
            samples: Array2::from_shape_vec((1, 2), vec![0.5, -1.0]).unwrap(),
            classes: vec![1],
            seed: 9,
            mode: SamplerMode::Ddim,
        };
        let mut buf = Vec::new();
        set.write_csv(2, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x_1,x_2,class,seed,sampler\n0.5,-1.0,1,9,ddim\n");
        let empty = SampleSet {
            samples: Array2::zeros((0, 2)),
            classes: vec![],
            seed: 0,
            mode: SamplerMode::Ddpm,
        };
        let mut buf = Vec::new();
        empty.write_csv(2, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x_1,x_2,class,seed,sampler\n");
    }
}
