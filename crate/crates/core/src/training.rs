//! Joint optimization of the denoiser θ and adapter φ with the x₀ objective
//! Σ_t λ_t‖f_θ(x_t, c, t) − x₀‖², where x_t carries the adapter bias so φ
//! receives gradients through the noisy sample. Also hosts the variational
//! bound evaluator and the paired-run comparison.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::adapter::{load_matching, AdapterSpec, Condition, ContextAdapter};
use crate::data::ToyDataset;
use crate::denoiser::{Denoiser, DenoiserSpec, X0Predictor};
use crate::error::{Error, Result};
use crate::forward::{posterior_coefs, posterior_mean, Fault, ForwardProcess};
use crate::gaussian::GaussianParams;
use crate::nn::{AdamState, AdamWConfig, Checkpoint, Mat, ParamGrads, ParamSet, Tape};
use crate::noise::{stream, NoiseSource};
use crate::reverse::ReverseProcess;
use crate::schedule::{NoiseSchedule, ScheduleSpec};

const THETA_INIT_STREAM: u64 = 0;
const PHI_INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const LIPSCHITZ_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

/// Records used for Lipschitz estimates.
const LIPSCHITZ_SAMPLES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    #[default]
    Unit,
    Lipschitz,
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from lr at step 0 to 0 at `steps`.
    Cosine,
}

impl LrSchedule {
    /// Multiplier applied to the update that takes `step` to `step + 1`.
    pub fn factor(self, step: u64, steps: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset identifier; the CLI treats it as a CSV path.
    pub dataset: String,
    pub schedule: ScheduleSpec,
    pub adapter: AdapterSpec,
    pub denoiser: DenoiserSpec,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default)]
    pub seed: u64,
    /// Keep φ at its initial value.
    #[serde(default)]
    pub freeze_adapter: bool,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Evaluate the NELBO every this many steps; 0 disables it.
    #[serde(default)]
    pub nelbo_every: u64,
    #[serde(default = "default_nelbo_records")]
    pub nelbo_records: usize,
    #[serde(default = "default_lipschitz_refresh")]
    pub lipschitz_refresh: u64,
    #[serde(default = "default_lipschitz_pairs")]
    pub lipschitz_pairs: usize,
}

fn default_log_every() -> u64 {
    10
}

fn default_nelbo_records() -> usize {
    256
}

fn default_lipschitz_refresh() -> u64 {
    100
}

fn default_lipschitz_pairs() -> usize {
    64
}

impl TrainConfig {
    pub fn new(dataset: impl Into<String>, schedule: ScheduleSpec, adapter: AdapterSpec, denoiser: DenoiserSpec) -> Self {
        TrainConfig {
            dataset: dataset.into(),
            schedule,
            adapter,
            denoiser,
            steps: 1000,
            batch_size: 128,
            optimizer: AdamWConfig::default(),
            lr_schedule: LrSchedule::Constant,
            lambda_mode: LambdaMode::Unit,
            seed: 0,
            freeze_adapter: false,
            log_every: default_log_every(),
            nelbo_every: 0,
            nelbo_records: default_nelbo_records(),
            lipschitz_refresh: default_lipschitz_refresh(),
            lipschitz_pairs: default_lipschitz_pairs(),
        }
    }

    /// Every constraint violation, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.schedule.build() {
            out.push(format!("schedule: {e}"));
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            out.push(format!("optimizer.lr: must be > 0, got {}", o.lr));
        }
        for (name, b) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("optimizer.{name}: must be in [0, 1), got {b}"));
            }
        }
        if !(o.eps > 0.0) {
            out.push(format!("optimizer.eps: must be > 0, got {}", o.eps));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            out.push(format!("optimizer.weight_decay: must be >= 0, got {}", o.weight_decay));
        }
        if self.adapter.dim() != self.denoiser.dim {
            out.push(format!(
                "adapter: dim {} does not match denoiser dim {}",
                self.adapter.dim(),
                self.denoiser.dim
            ));
        }
        if let AdapterSpec::Learned(spec) = &self.adapter {
            if spec.classes != self.denoiser.classes {
                out.push(format!(
                    "adapter: {} classes but denoiser has {}",
                    spec.classes, self.denoiser.classes
                ));
            }
        }
        if self.log_every == 0 {
            out.push("log_every: must be >= 1".into());
        }
        if self.lipschitz_refresh == 0 {
            out.push("lipschitz_refresh: must be >= 1".into());
        }
        if self.lambda_mode == LambdaMode::Lipschitz && self.lipschitz_pairs == 0 {
            out.push("lipschitz_pairs: must be >= 1 in lipschitz mode".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(p.join("; ")))
        }
    }

    /// SHA-256 of the canonical (sorted-key) JSON form.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

/// Schedule, adapter and denoiser of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub schedule: NoiseSchedule,
    pub adapter: ContextAdapter,
    pub denoiser: Denoiser,
}

impl Model {
    /// Deterministic initialization; θ and φ use separate streams so paired
    /// runs that differ only in the adapter start from the same θ.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule.build()?;
        let denoiser = Denoiser::new(cfg.denoiser.clone(), &schedule, &mut stream(cfg.seed, THETA_INIT_STREAM))?;
        let adapter = cfg.adapter.build(schedule.steps(), &mut stream(cfg.seed, PHI_INIT_STREAM))?;
        Ok(Model {
            schedule,
            adapter,
            denoiser,
        })
    }

    pub fn forward(&self) -> ForwardProcess<'_> {
        ForwardProcess::new(&self.schedule, &self.adapter)
    }

    pub fn reverse(&self) -> ReverseProcess<'_, Denoiser> {
        ReverseProcess::new(&self.schedule, &self.adapter, &self.denoiser)
    }
}

/// λ_t from explicit quantities:
/// √ᾱ_{t−1}β_t/(1−ᾱ_t) + (√α_t(1−ᾱ_{t−1})/(1−ᾱ_t))·k_t·C_t + k_{t−1}·C_{t−1}.
#[allow(clippy::too_many_arguments)]
pub fn lambda_coefficient(
    alpha: f64,
    alpha_bar_prev: f64,
    alpha_bar: f64,
    k: f64,
    k_prev: f64,
    c: f64,
    c_prev: f64,
) -> f64 {
    let beta = 1.0 - alpha;
    let c1 = alpha_bar_prev.sqrt() * beta / (1.0 - alpha_bar);
    let c2 = alpha.sqrt() * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar);
    c1 + c2 * k * c + k_prev * c_prev
}

/// Loss weight at timestep t. `estimates[t]` is C_t, indexed 0..=T.
pub fn lambda_weight(mode: LambdaMode, schedule: &NoiseSchedule, t: usize, estimates: Option<&[f64]>) -> Result<f64> {
    schedule.check_t(t, 1)?;
    match mode {
        LambdaMode::Unit => Ok(1.0),
        LambdaMode::Lipschitz => {
            let c = estimates.ok_or_else(|| Error::invalid("lipschitz mode needs C_t estimates"))?;
            if c.len() != schedule.steps() + 1 {
                return Err(Error::Dimension {
                    expected: schedule.steps() + 1,
                    got: c.len(),
                });
            }
            let (c1, c2, _) = posterior_coefs(schedule, t);
            Ok(c1 + c2 * schedule.gain(t) * c[t] + schedule.gain(t - 1) * c[t - 1])
        }
    }
}

/// C_t for t = 0..=T on the first records of `data`.
pub fn lipschitz_table<R: Rng + ?Sized>(
    adapter: &ContextAdapter,
    schedule: &NoiseSchedule,
    data: &ToyDataset,
    pairs: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = data.len().min(LIPSCHITZ_SAMPLES);
    let samples: Vec<(Vec<f64>, Condition)> = (0..n).map(|i| (data.row(i), Condition::new(data.classes[i]))).collect();
    (0..=schedule.steps())
        .map(|t| adapter.estimate_lipschitz(&samples, t, pairs, rng))
        .collect()
}

/// One batch with its noise fixed: item i uses timestep `ts[i]`, noise row
/// `eps[i]` and weight `lambdas[i]`.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub x0: &'a Mat,
    pub classes: &'a [usize],
    pub ts: &'a [usize],
    pub eps: &'a Mat,
    pub lambdas: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// (1/B)·Σ λ_i‖f_θ(x_t,i) − x₀,i‖²
    pub loss: f64,
    /// Unweighted ‖f_θ − x₀‖² per item.
    pub per_item: Vec<f64>,
    pub theta: ParamGrads,
    /// Present when the adapter has trainable parameters.
    pub phi: Option<ParamGrads>,
}

/// Loss and exact gradients for a batch with fixed (t, ε).
pub fn loss_with_noise(model: &Model, inp: LossInputs<'_>, train_adapter: bool) -> Result<LossOutput> {
    let n = inp.x0.nrows();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if inp.classes.len() != n || inp.ts.len() != n || inp.lambdas.len() != n || inp.eps.dim() != inp.x0.dim() {
        return Err(Error::Shape {
            op: "loss",
            detail: format!(
                "{n} rows, {} classes, {} timesteps, {} weights, noise {:?}",
                inp.classes.len(),
                inp.ts.len(),
                inp.lambdas.len(),
                inp.eps.dim()
            ),
        });
    }
    let s = &model.schedule;
    for &t in inp.ts {
        s.check_t(t, 1)?;
    }
    let mut tape = Tape::new();
    let theta = model.denoiser.params().bind(&mut tape);
    let phi = model.adapter.params().map(|p| {
        if train_adapter {
            p.bind(&mut tape)
        } else {
            p.bind_frozen(&mut tape)
        }
    });
    let x0 = tape.constant(inp.x0.clone());
    let r = model.adapter.forward_on_tape(&mut tape, phi.as_ref(), x0, inp.classes, inp.ts)?;
    let bias = tape.scale_rows(r, inp.ts.iter().map(|&t| s.gain(t)).collect())?;
    let mut clean = inp.x0.clone();
    let mut noise = inp.eps.clone();
    for (i, &t) in inp.ts.iter().enumerate() {
        clean.row_mut(i).mapv_inplace(|v| s.alpha_bar(t).sqrt() * v);
        noise.row_mut(i).mapv_inplace(|e| (1.0 - s.alpha_bar(t)).sqrt() * e);
    }
    let clean = tape.constant(clean);
    let mean = tape.add(clean, bias)?;
    let noise = tape.constant(noise);
    let x_t = tape.add(mean, noise)?;
    let pred = model.denoiser.forward_on_tape(&mut tape, &theta, x_t, inp.classes, inp.ts)?;
    let diff = tape.sub(pred, x0)?;
    let sq = tape.row_sq_norm(diff);
    let per_item: Vec<f64> = tape.value(sq).column(0).to_vec();
    let bad: Vec<usize> = (0..n).filter(|&i| !per_item[i].is_finite()).collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite {
            what: "per-item loss".into(),
            indices: bad,
        });
    }
    let weights = inp.lambdas.iter().map(|l| l / n as f64).collect();
    let loss = tape.weighted_sum(sq, weights)?;
    let grads = tape.backward(loss)?;
    Ok(LossOutput {
        loss: tape.value(loss)[[0, 0]],
        per_item,
        theta: theta.collect(&tape, &grads),
        phi: phi.filter(|_| train_adapter).map(|p| p.collect(&tape, &grads)),
    })
}

/// Per item: t uniform in 1..=T, then d standard normals.
pub fn draw_noise<R: Rng + ?Sized>(schedule: &NoiseSchedule, n: usize, d: usize, rng: &mut R) -> (Vec<usize>, Mat) {
    let mut ts = Vec::with_capacity(n);
    let mut eps = Array2::zeros((n, d));
    for i in 0..n {
        ts.push(rng.random_range(1..=schedule.steps()));
        for v in eps.row_mut(i).iter_mut() {
            *v = rng.standard_normal();
        }
    }
    (ts, eps)
}

/// Draws (t, ε) for every item and evaluates [`loss_with_noise`].
pub fn loss_batch<R: Rng + ?Sized>(
    model: &Model,
    x0: &Mat,
    classes: &[usize],
    mode: LambdaMode,
    lipschitz: Option<&[f64]>,
    train_adapter: bool,
    rng: &mut R,
) -> Result<LossOutput> {
    if x0.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let (ts, eps) = draw_noise(&model.schedule, x0.nrows(), x0.ncols(), rng);
    let lambdas = ts
        .iter()
        .map(|&t| lambda_weight(mode, &model.schedule, t, lipschitz))
        .collect::<Result<Vec<_>>>()?;
    loss_with_noise(
        model,
        LossInputs {
            x0,
            classes,
            ts: &ts,
            eps: &eps,
            lambdas: &lambdas,
        },
        train_adapter,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NelboOptions {
    pub mc_samples: usize,
    pub seed: u64,
    /// Variance of the Gaussian reconstruction term p(x₀ | x₁, c).
    pub recon_var: f64,
}

impl Default for NelboOptions {
    fn default() -> Self {
        NelboOptions {
            mc_samples: 1,
            seed: 0,
            recon_var: 1e-3,
        }
    }
}

/// Variational bound averaged over records, in nats unless noted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NelboReport {
    pub records: usize,
    pub dim: usize,
    pub prior: f64,
    /// Mean KL at t = 2..=T, in that order.
    pub interior: Vec<f64>,
    pub reconstruction: f64,
    pub total_nats: f64,
    pub bits_per_dim: f64,
    pub per_record_bits: Vec<f64>,
}

/// Per-record terms at one timestep.
fn nelbo_term<P: X0Predictor + ?Sized>(
    schedule: &NoiseSchedule,
    adapter: &ContextAdapter,
    denoiser: &P,
    data: &ToyDataset,
    t: usize,
    opts: &NelboOptions,
) -> Result<Vec<f64>> {
    let (n, d) = (data.len(), data.dim());
    let x0 = &data.x;
    let classes = &data.classes;
    let ts = vec![t; n];
    let b_t = adapter.bias_batch(schedule, x0, classes, &ts)?;
    let b_prev = if t >= 2 {
        Some(adapter.bias_batch(schedule, x0, classes, &vec![t - 1; n])?)
    } else {
        None
    };
    let (c1, c2, var) = posterior_coefs(schedule, t);
    let sab = schedule.alpha_bar(t).sqrt();
    let sd = (1.0 - schedule.alpha_bar(t)).sqrt();
    let mut rng = stream(opts.seed, t as u64);
    let mut out = vec![0.0; n];
    for _ in 0..opts.mc_samples {
        let mut x_t = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                x_t[[i, j]] = (sab * x0[[i, j]] + b_t[[i, j]]) + sd * rng.standard_normal();
            }
        }
        let x0_hat = denoiser.predict_batch(&x_t, classes, &ts)?;
        if let Some(b_prev) = &b_prev {
            let bh_t = adapter.bias_batch(schedule, &x0_hat, classes, &ts)?;
            let bh_prev = adapter.bias_batch(schedule, &x0_hat, classes, &vec![t - 1; n])?;
            for i in 0..n {
                let row = |m: &Mat| m.row(i).to_vec();
                let xt = row(&x_t);
                let q = posterior_mean(c1, c2, &row(x0), &xt, &row(&b_t), &row(b_prev), Fault::None);
                let p = posterior_mean(c1, c2, &row(&x0_hat), &xt, &row(&bh_t), &row(&bh_prev), Fault::None);
                out[i] += GaussianParams::new(q, var).kl(&GaussianParams::new(p, var))?;
            }
        } else {
            let w = opts.recon_var;
            let log_norm = 0.5 * d as f64 * (2.0 * std::f64::consts::PI * w).ln();
            for i in 0..n {
                let sq: f64 = (0..d).map(|j| (x0[[i, j]] - x0_hat[[i, j]]).powi(2)).sum();
                out[i] += log_norm + sq / (2.0 * w);
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= opts.mc_samples as f64);
    Ok(out)
}

/// Monte-Carlo estimate of the variational bound on −log p(x₀ | c).
///
/// Timestep t draws from its own stream under `opts.seed`, so two models
/// evaluated with the same seed share their noise.
pub fn nelbo<P: X0Predictor + Sync + ?Sized>(
    schedule: &NoiseSchedule,
    adapter: &ContextAdapter,
    denoiser: &P,
    data: &ToyDataset,
    opts: &NelboOptions,
) -> Result<NelboReport> {
    if data.is_empty() {
        return Err(Error::invalid("NELBO needs at least one record"));
    }
    if opts.mc_samples == 0 || !(opts.recon_var > 0.0) {
        return Err(Error::invalid("NELBO needs mc_samples >= 1 and recon_var > 0"));
    }
    let (n, d) = (data.len(), data.dim());
    let steps = schedule.steps();
    let fp = ForwardProcess::new(schedule, adapter);
    let prior = (0..n)
        .map(|i| {
            let q = fp.marginal(&data.row(i), Condition::new(data.classes[i]), steps)?;
            q.kl(&GaussianParams::new(vec![0.0; d], 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let terms = (1..=steps)
        .into_par_iter()
        .map(|t| nelbo_term(schedule, adapter, denoiser, data, t, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut totals = prior.clone();
    for term in &terms {
        totals.iter_mut().zip(term).for_each(|(a, b)| *a += b);
    }
    let bad: Vec<usize> = (0..n).filter(|&i| !totals[i].is_finite()).collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite {
            what: "NELBO terms".into(),
            indices: bad,
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let to_bits = d as f64 * std::f64::consts::LN_2;
    let total_nats = mean(&totals);
    Ok(NelboReport {
        records: n,
        dim: d,
        prior: mean(&prior),
        interior: terms[1..].iter().map(|v| mean(v)).collect(),
        reconstruction: mean(&terms[0]),
        total_nats,
        bits_per_dim: total_nats / to_bits,
        per_record_bits: totals.iter().map(|v| v / to_bits).collect(),
    })
}

/// Exact interior KL at one state and its Lipschitz-weighted bound
/// λ²‖x̂₀ − x₀‖²/(2σ̃²).
#[allow(clippy::too_many_arguments)]
pub fn interior_kl_and_bound(
    schedule: &NoiseSchedule,
    adapter: &ContextAdapter,
    x0: &[f64],
    x0_hat: &[f64],
    x_t: &[f64],
    c: Condition,
    t: usize,
    lambda: f64,
) -> Result<(f64, f64)> {
    schedule.check_t(t, 2)?;
    let fp = ForwardProcess::new(schedule, adapter);
    let q = fp.posterior(x_t, x0, c, t)?;
    let p = fp.posterior(x_t, x0_hat, c, t)?;
    let sq: f64 = x0.iter().zip(x0_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((q.kl(&p)?, lambda * lambda * sq / (2.0 * q.var)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub resamples: usize,
}

/// Percentile bootstrap CI of mean(a − b) over paired records.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("paired bootstrap needs equal non-empty samples, got {} and {}", a.len(), b.len())));
    }
    if resamples == 0 || !(0.0 < level && level < 1.0) {
        return Err(Error::invalid("bootstrap needs resamples >= 1 and level in (0, 1)"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mut rng = stream(seed, 0);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo_idx = ((tail * resamples as f64).floor() as usize).min(resamples - 1);
    let hi_idx = (((1.0 - tail) * resamples as f64).ceil() as usize).saturating_sub(1).min(resamples - 1);
    Ok(BootstrapCi {
        mean: diffs.iter().sum::<f64>() / n as f64,
        lo: means[lo_idx],
        hi: means[hi_idx],
        level,
        resamples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedNelbo {
    pub contextdiff: f64,
    pub baseline: f64,
    pub difference: f64,
    pub ci: BootstrapCi,
}

/// Bits/dim comparison of two reports over the same records.
pub fn compare_nelbo(contextdiff: &NelboReport, baseline: &NelboReport, resamples: usize, seed: u64) -> Result<PairedNelbo> {
    let ci = paired_bootstrap(&contextdiff.per_record_bits, &baseline.per_record_bits, resamples, 0.95, seed)?;
    Ok(PairedNelbo {
        contextdiff: contextdiff.bits_per_dim,
        baseline: baseline.bits_per_dim,
        difference: ci.mean,
        ci,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub nelbo: Option<f64>,
}

/// CSV with columns step, loss, nelbo (empty when not evaluated).
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::invalid(format!("metrics write: {e}"));
    w.write_record(["step", "loss", "nelbo"]).map_err(io)?;
    for r in rows {
        let nelbo = r.nelbo.map(|v| format!("{v:?}")).unwrap_or_default();
        w.write_record([r.step.to_string(), format!("{:?}", r.loss), nelbo]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("metrics write: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub opt_theta: AdamState,
    /// Present when φ is trained.
    pub opt_phi: Option<AdamState>,
    pub step: u64,
    /// Exponential moving average of the batch loss (factor 0.99).
    pub loss_ema: f64,
    pub last_loss: f64,
    pub rng: ChaCha8Rng,
    pub lipschitz: Option<Vec<f64>>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::init(cfg)?;
        let opt_theta = AdamState::new(model.denoiser.params());
        let opt_phi = match (model.adapter.params(), cfg.freeze_adapter) {
            (Some(p), false) => Some(AdamState::new(p)),
            _ => None,
        };
        Ok(TrainState {
            model,
            opt_theta,
            opt_phi,
            step: 0,
            loss_ema: f64::NAN,
            last_loss: f64::NAN,
            rng: stream(cfg.seed, BATCH_STREAM),
            lipschitz: None,
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut all = ParamSet::new();
        let mut add = |prefix: &str, set: &ParamSet| {
            for t in set.tensors() {
                all.push(format!("{prefix}/{}", t.name), t.value.clone()).expect("prefixed names are unique");
            }
        };
        add("theta", self.model.denoiser.params());
        if let Some(p) = self.model.adapter.params() {
            add("phi", p);
        }
        add("adam.theta.m", &self.opt_theta.m);
        add("adam.theta.v", &self.opt_theta.v);
        if let Some(o) = &self.opt_phi {
            add("adam.phi.m", &o.m);
            add("adam.phi.v", &o.v);
        }
        let mut state = ParamSet::new();
        let loss = Array2::from_shape_vec((1, 2), vec![self.loss_ema, self.last_loss]).expect("1x2");
        state.push("loss", loss).expect("fresh set");
        if let Some(c) = &self.lipschitz {
            state.push("lipschitz", Array2::from_shape_vec((1, c.len()), c.clone()).expect("row")).expect("fresh set");
        }
        add("state", &state);
        let meta = json!({
            "adam_theta_t": self.opt_theta.t,
            "adam_phi_t": self.opt_phi.as_ref().map(|o| o.t),
            "rng": {
                "seed": hex::encode(self.rng.get_seed()),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "config": cfg,
        });
        Checkpoint::new(all, cfg.config_hash(), self.step, meta)
    }

    /// Restores using the config embedded in the checkpoint itself.
    pub fn from_checkpoint_embedded(ckpt: &Checkpoint) -> Result<(TrainConfig, Self)> {
        let cfg = embedded_config(ckpt)?;
        let st = TrainState::from_checkpoint(&cfg, ckpt)?;
        Ok((cfg, st))
    }

    pub fn from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.header.config_hash != cfg.config_hash() {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, config {}",
                ckpt.header.config_hash,
                cfg.config_hash()
            )));
        }
        let mut st = TrainState::init(cfg)?;
        let part = |prefix: &str| -> Result<ParamSet> {
            let mut out = ParamSet::new();
            let lead = format!("{prefix}/");
            for t in ckpt.params.tensors() {
                if let Some(name) = t.name.strip_prefix(&lead) {
                    out.push(name, t.value.clone())?;
                }
            }
            Ok(out)
        };
        st.model.denoiser.load_params(part("theta")?)?;
        if let Some(p) = st.model.adapter.params_mut() {
            load_matching(p, part("phi")?)?;
        }
        load_matching(&mut st.opt_theta.m, part("adam.theta.m")?)?;
        load_matching(&mut st.opt_theta.v, part("adam.theta.v")?)?;
        let meta = &ckpt.header.meta;
        let bad = |what: &str| Error::Checkpoint(format!("missing or invalid meta field {what}"));
        st.opt_theta.t = meta["adam_theta_t"].as_u64().ok_or_else(|| bad("adam_theta_t"))?;
        if let Some(o) = &mut st.opt_phi {
            load_matching(&mut o.m, part("adam.phi.m")?)?;
            load_matching(&mut o.v, part("adam.phi.v")?)?;
            o.t = meta["adam_phi_t"].as_u64().ok_or_else(|| bad("adam_phi_t"))?;
        }
        let state = part("state")?;
        let loss = state.by_name("loss").ok_or_else(|| bad("state/loss"))?;
        if loss.dim() != (1, 2) {
            return Err(bad("state/loss"));
        }
        st.loss_ema = loss[[0, 0]];
        st.last_loss = loss[[0, 1]];
        st.lipschitz = state.by_name("lipschitz").map(|m| m.iter().copied().collect());
        let rng = &meta["rng"];
        let seed: [u8; 32] = rng["seed"]
            .as_str()
            .and_then(|s| hex::decode(s).ok())
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("rng.seed"))?;
        let word_pos: u128 = rng["word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("rng.word_pos"))?;
        st.rng = ChaCha8Rng::from_seed(seed);
        st.rng.set_stream(rng["stream"].as_u64().ok_or_else(|| bad("rng.stream"))?);
        st.rng.set_word_pos(word_pos);
        st.step = ckpt.header.step;
        Ok(st)
    }
}

/// The training config stored in checkpoint metadata.
pub fn embedded_config(ckpt: &Checkpoint) -> Result<TrainConfig> {
    serde_json::from_value(ckpt.header.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricRow>,
}

fn check_data(cfg: &TrainConfig, data: &ToyDataset) -> Result<()> {
    if data.is_empty() && cfg.steps > 0 {
        return Err(Error::Dataset("training needs at least one record".into()));
    }
    if !data.is_empty() && data.dim() != cfg.denoiser.dim {
        return Err(Error::Dimension {
            expected: cfg.denoiser.dim,
            got: data.dim(),
        });
    }
    if let Some(&c) = data.classes.iter().find(|&&c| c >= cfg.denoiser.classes) {
        return Err(Error::Class {
            class: c,
            classes: cfg.denoiser.classes,
        });
    }
    Ok(())
}

/// Trains from a fresh initialization for `cfg.steps` optimizer steps.
pub fn train(cfg: &TrainConfig, data: &ToyDataset) -> Result<TrainOutcome> {
    resume(TrainState::init(cfg)?, cfg, data)
}

/// Continues `state` until `cfg.steps`. A resumed run matches an
/// uninterrupted one bit for bit.
pub fn resume(st: TrainState, cfg: &TrainConfig, data: &ToyDataset) -> Result<TrainOutcome> {
    resume_until(st, cfg, data, cfg.steps)
}

/// Like [`resume`] but stops after step `min(stop, cfg.steps)`; the
/// learning-rate schedule still spans `cfg.steps`.
pub fn resume_until(mut st: TrainState, cfg: &TrainConfig, data: &ToyDataset, stop: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let mut metrics = Vec::new();
    let (b, d) = (cfg.batch_size, cfg.denoiser.dim);
    let train_adapter = st.opt_phi.is_some();
    let eval = (cfg.nelbo_every > 0).then(|| data.head(cfg.nelbo_records));
    let stop = stop.min(cfg.steps);
    while st.step < stop {
        let s = &st.model.schedule;
        if cfg.lambda_mode == LambdaMode::Lipschitz && (st.lipschitz.is_none() || st.step % cfg.lipschitz_refresh == 0) {
            let mut rng = stream(cfg.seed.wrapping_add(st.step), LIPSCHITZ_STREAM);
            st.lipschitz = Some(lipschitz_table(&st.model.adapter, s, data, cfg.lipschitz_pairs, &mut rng)?);
        }
        let mut x0 = Array2::zeros((b, d));
        let mut classes = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        let mut eps = Array2::zeros((b, d));
        for i in 0..b {
            let idx = st.rng.random_range(0..data.len());
            x0.row_mut(i).assign(&data.x.row(idx));
            classes.push(data.classes[idx]);
            ts.push(st.rng.random_range(1..=s.steps()));
            for v in eps.row_mut(i).iter_mut() {
                *v = st.rng.standard_normal();
            }
        }
        let lambdas = ts
            .iter()
            .map(|&t| lambda_weight(cfg.lambda_mode, s, t, st.lipschitz.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        let inputs = LossInputs {
            x0: &x0,
            classes: &classes,
            ts: &ts,
            eps: &eps,
            lambdas: &lambdas,
        };
        let out = loss_with_noise(&st.model, inputs, train_adapter).map_err(|e| Error::Divergence {
            step: st.step + 1,
            detail: e.to_string(),
        })?;
        if !out.loss.is_finite() {
            return Err(Error::Divergence {
                step: st.step + 1,
                detail: format!("loss = {}", out.loss),
            });
        }
        let mut opt_cfg = cfg.optimizer;
        opt_cfg.lr *= cfg.lr_schedule.factor(st.step, cfg.steps);
        st.opt_theta.step(st.model.denoiser.params_mut(), &out.theta, &opt_cfg)?;
        if let (Some(opt), Some(g), Some(p)) = (&mut st.opt_phi, &out.phi, st.model.adapter.params_mut()) {
            opt.step(p, g, &opt_cfg)?;
        }
        st.step += 1;
        st.last_loss = out.loss;
        st.loss_ema = if st.loss_ema.is_nan() {
            out.loss
        } else {
            0.99 * st.loss_ema + 0.01 * out.loss
        };
        let at_nelbo = cfg.nelbo_every > 0 && st.step % cfg.nelbo_every == 0;
        if st.step % cfg.log_every == 0 || st.step == stop || at_nelbo {
            let nelbo = match (&eval, at_nelbo) {
                (Some(ev), true) if !ev.is_empty() => {
                    let opts = NelboOptions {
                        seed: stream(cfg.seed, EVAL_STREAM).random(),
                        ..Default::default()
                    };
                    let m = &st.model;
                    Some(nelbo(&m.schedule, &m.adapter, &m.denoiser, ev, &opts)?.bits_per_dim)
                }
                _ => None,
            };
            metrics.push(MetricRow {
                step: st.step,
                loss: out.loss,
                nelbo,
            });
        }
    }
    Ok(TrainOutcome { state: st, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{LearnedAdapterSpec, OutputInit};
    use crate::data::{DatasetSpec, Generator};
    use crate::denoiser::KnownX0;
    use crate::nn::{grad_check, GradCheckOptions};
    use crate::noise::seeded;
    use crate::toy_oracle::ToyModel;

    fn data(n: usize) -> ToyDataset {
        ToyDataset::generate(&DatasetSpec {
            generator: Generator::ToyGaussian {
                model: ToyModel::two_class(),
            },
            count: n,
            seed: 1,
        })
        .unwrap()
    }

    fn small_config(adapter: AdapterSpec) -> TrainConfig {
        let mut den = DenoiserSpec::new(2, 2);
        den.hidden = 8;
        den.data_scale = 2.0;
        let mut cfg = TrainConfig::new("mem", ScheduleSpec::cosine(20), adapter, den);
        cfg.steps = 5;
        cfg.batch_size = 4;
        cfg
    }

    fn learned_spec(init: OutputInit) -> AdapterSpec {
        let mut spec = LearnedAdapterSpec::new(2, 2);
        spec.hidden = 6;
        spec.output_init = init;
        AdapterSpec::Learned(spec)
    }

    #[test]
    fn lambda_worked_value() {
        let v = lambda_coefficient(0.9, 0.8, 0.72, 0.2, 0.1, 0.2, 0.2);
        assert!((v - 0.3665435195871273).abs() < 1e-15, "{v}");
        let s = ScheduleSpec::cosine(30).build().unwrap();
        assert_eq!(lambda_weight(LambdaMode::Unit, &s, 7, None).unwrap(), 1.0);
        assert!(lambda_weight(LambdaMode::Lipschitz, &s, 7, None).is_err());
        let zeros = vec![0.0; 31];
        let (c1, _, _) = posterior_coefs(&s, 7);
        assert_eq!(lambda_weight(LambdaMode::Lipschitz, &s, 7, Some(&zeros)).unwrap(), c1);
        // t = 1 reduces to c₁ = 1
        assert!((lambda_weight(LambdaMode::Lipschitz, &s, 1, Some(&zeros)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small_config(learned_spec(OutputInit::Uniform));
        let mut model = Model::init(&cfg).unwrap();
        let ds = data(6);
        let (ts, eps) = draw_noise(&model.schedule, 6, 2, &mut seeded(3));
        let lambdas: Vec<f64> = (0..6).map(|i| 0.5 + i as f64 * 0.1).collect();
        let inp = LossInputs {
            x0: &ds.x,
            classes: &ds.classes,
            ts: &ts,
            eps: &eps,
            lambdas: &lambdas,
        };
        let out = loss_with_noise(&model, inp, true).unwrap();
        let n_theta = model.denoiser.params().count();
        let mut point = model.denoiser.params().flat();
        point.extend(model.adapter.params().unwrap().flat());
        let mut analytic = out.theta.flat();
        analytic.extend(out.phi.unwrap().flat());
        let report = grad_check(
            &point,
            &analytic,
            |p| {
                model.denoiser.params_mut().set_flat(&p[..n_theta])?;
                model.adapter.params_mut().unwrap().set_flat(&p[n_theta..])?;
                Ok(loss_with_noise(&model, inp, true)?.loss)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn empty_and_mismatched_batches_fail() {
        let model = Model::init(&small_config(AdapterSpec::Zero { dim: 2 })).unwrap();
        let empty = Array2::zeros((0, 2));
        assert!(loss_batch(&model, &empty, &[], LambdaMode::Unit, None, true, &mut seeded(0)).is_err());
        let x = Array2::zeros((2, 2));
        assert!(loss_batch(&model, &x, &[0], LambdaMode::Unit, None, true, &mut seeded(0)).is_err());
    }

    #[test]
    fn frozen_adapter_gets_no_gradient() {
        let model = Model::init(&small_config(learned_spec(OutputInit::Uniform))).unwrap();
        let ds = data(4);
        let out = loss_batch(&model, &ds.x, &ds.classes, LambdaMode::Unit, None, false, &mut seeded(0)).unwrap();
        assert!(out.phi.is_none());
        assert!(out.loss > 0.0);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let mut cfg = small_config(learned_spec(OutputInit::Zero));
        cfg.steps = 0;
        let out = train(&cfg, &data(0)).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.state.model, Model::init(&cfg).unwrap());
    }

    #[test]
    fn lr_schedule_factors() {
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
        assert_eq!(LrSchedule::Cosine.factor(0, 10), 1.0);
        assert!((LrSchedule::Cosine.factor(5, 10) - 0.5).abs() < 1e-15);
        assert!(LrSchedule::Cosine.factor(9, 10) > 0.0);
        assert_eq!(LrSchedule::Cosine.factor(0, 0), 1.0);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let mut cfg = small_config(learned_spec(OutputInit::Zero));
        cfg.lambda_mode = LambdaMode::Lipschitz;
        cfg.lipschitz_refresh = 2;
        cfg.nelbo_every = 3;
        cfg.nelbo_records = 8;
        let ds = data(32);
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.state.to_checkpoint(&cfg).to_bytes().unwrap(), b.state.to_checkpoint(&cfg).to_bytes().unwrap());
        assert!(a.metrics.iter().any(|m| m.nelbo.is_some()));

        let mut half = cfg.clone();
        half.steps = 3;
        let first = train(&half, &ds).unwrap();
        let ckpt = first.state.to_checkpoint(&cfg);
        let bytes = ckpt.to_bytes().unwrap();
        let loaded = Checkpoint::from_reader(bytes.as_slice()).unwrap();
        let restored = TrainState::from_checkpoint(&cfg, &loaded).unwrap();
        assert_eq!(restored.to_checkpoint(&cfg).to_bytes().unwrap(), bytes);
        let resumed = resume(restored, &cfg, &ds).unwrap();
        assert_eq!(resumed.state.to_checkpoint(&cfg).to_bytes().unwrap(), a.state.to_checkpoint(&cfg).to_bytes().unwrap());
    }

    #[test]
    fn checkpoint_rejects_other_config() {
        let cfg = small_config(AdapterSpec::Zero { dim: 2 });
        let ckpt = TrainState::init(&cfg).unwrap().to_checkpoint(&cfg);
        let mut other = cfg.clone();
        other.seed = 9;
        assert!(matches!(TrainState::from_checkpoint(&other, &ckpt), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = small_config(AdapterSpec::Zero { dim: 2 });
        cfg.optimizer.lr = 1e300;
        cfg.steps = 50;
        let err = train(&cfg, &data(16)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn config_problems_are_exhaustive() {
        let mut cfg = small_config(AdapterSpec::Zero { dim: 3 });
        cfg.batch_size = 0;
        cfg.optimizer.lr = 0.0;
        cfg.optimizer.beta2 = 1.0;
        let p = cfg.problems();
        assert_eq!(p.len(), 4, "{p:?}");
        assert!(p[0].starts_with("batch_size"));
    }

    #[test]
    fn perfect_denoiser_has_zero_interior_kl() {
        let cfg = small_config(learned_spec(OutputInit::Uniform));
        let model = Model::init(&cfg).unwrap();
        let ds = data(5);
        let known = KnownX0 { rows: ds.x.clone() };
        let r = nelbo(&model.schedule, &model.adapter, &known, &ds, &NelboOptions::default()).unwrap();
        assert_eq!(r.interior.len(), 19);
        assert!(r.interior.iter().all(|&v| v.abs() < 1e-12), "{:?}", r.interior);
        let expected_recon = 0.5 * 2.0 * (2.0 * std::f64::consts::PI * 1e-3f64).ln();
        assert!((r.reconstruction - expected_recon).abs() < 1e-12);
    }

    #[test]
    fn prior_term_ignores_adapter() {
        let ds = data(6);
        let mk = |seed| {
            let mut cfg = small_config(learned_spec(OutputInit::Uniform));
            cfg.seed = seed;
            Model::init(&cfg).unwrap()
        };
        let (a, b) = (mk(1), mk(2));
        assert_ne!(a.adapter, b.adapter);
        let ra = nelbo(&a.schedule, &a.adapter, &a.denoiser, &ds, &NelboOptions::default()).unwrap();
        let rb = nelbo(&b.schedule, &b.adapter, &a.denoiser, &ds, &NelboOptions::default()).unwrap();
        assert!((ra.prior - rb.prior).abs() < 1e-12);
        let again = nelbo(&a.schedule, &a.adapter, &a.denoiser, &ds, &NelboOptions::default()).unwrap();
        assert_eq!(ra, again);
    }

    #[test]
    fn lemma_bound_holds_on_linear_adapter() {
        let s = ScheduleSpec::cosine(50).build().unwrap();
        let a = ContextAdapter::linear_toy(2, 0.3).unwrap();
        let c = vec![0.3; 51];
        let mut rng = seeded(8);
        for _ in 0..200 {
            let t = rng.random_range(2..=50);
            let x0 = rng.standard_normal_vec(2);
            let x0_hat = rng.standard_normal_vec(2);
            let x_t = rng.standard_normal_vec(2);
            let lam = lambda_weight(LambdaMode::Lipschitz, &s, t, Some(&c)).unwrap();
            let (kl, bound) = interior_kl_and_bound(&s, &a, &x0, &x0_hat, &x_t, Condition::new(0), t, lam).unwrap();
            assert!(kl <= bound * (1.0 + 1e-12), "t={t}: {kl} > {bound}");
        }
    }

    #[test]
    fn bootstrap_brackets_mean() {
        let a: Vec<f64> = (0..200).map(|i| (i % 7) as f64 * 0.1).collect();
        let b = vec![0.25; 200];
        let ci = paired_bootstrap(&a, &b, 500, 0.95, 1).unwrap();
        assert!(ci.lo <= ci.mean && ci.mean <= ci.hi);
        assert_eq!(ci, paired_bootstrap(&a, &b, 500, 0.95, 1).unwrap());
        assert!(paired_bootstrap(&a, &b[..3], 10, 0.95, 0).is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = [
            MetricRow { step: 1, loss: 0.5, nelbo: None },
            MetricRow { step: 2, loss: 0.25, nelbo: Some(3.0) },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,nelbo\n1,0.5,\n2,0.25,3.0\n");
    }
}
