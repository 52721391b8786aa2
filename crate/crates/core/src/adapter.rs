//! The relational function r_φ(x₀, c, t) and the bias b_t = k_t·r_φ.
//!
//! Three variants share one interface: `Zero` (reduces everything to plain
//! DDPM), `LinearToy` (r·x₀ with fixed r ≥ 0) and `Learned` (a small network
//! mixing projected x₀ and class features through an elementwise product).

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{timestep_features, Activation, BoundParams, Dense, Embedding, Mat, ParamSet, Tape, Var};
use crate::schedule::NoiseSchedule;

/// Condition value c: a class id standing in for a text condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub class: usize,
}

impl Condition {
    pub fn new(class: usize) -> Self {
        Condition { class }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputInit {
    /// Output layer starts at zero so r_φ ≡ 0 at initialization.
    #[default]
    Zero,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnedAdapterSpec {
    pub dim: usize,
    pub classes: usize,
    #[serde(default = "default_adapter_hidden")]
    pub hidden: usize,
    #[serde(default = "default_class_dim")]
    pub class_dim: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub output_init: OutputInit,
}

fn default_adapter_hidden() -> usize {
    32
}

fn default_class_dim() -> usize {
    8
}

pub(crate) fn default_time_dim() -> usize {
    16
}

impl LearnedAdapterSpec {
    pub fn new(dim: usize, classes: usize) -> Self {
        LearnedAdapterSpec {
            dim,
            classes,
            hidden: default_adapter_hidden(),
            class_dim: default_class_dim(),
            time_dim: default_time_dim(),
            activation: Activation::Silu,
            output_init: OutputInit::Zero,
        }
    }
}

/// Serializable description of an adapter (parameters live in checkpoints).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterSpec {
    Zero { dim: usize },
    LinearToy { dim: usize, coefs: Vec<f64> },
    Learned(LearnedAdapterSpec),
}

impl AdapterSpec {
    pub fn dim(&self) -> usize {
        match self {
            AdapterSpec::Zero { dim } | AdapterSpec::LinearToy { dim, .. } => *dim,
            AdapterSpec::Learned(s) => s.dim,
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, steps: usize, rng: &mut R) -> Result<ContextAdapter> {
        match self {
            AdapterSpec::Zero { dim } => Ok(ContextAdapter::zero(*dim)),
            AdapterSpec::LinearToy { dim, coefs } => ContextAdapter::linear_toy_schedule(*dim, coefs.clone(), steps),
            AdapterSpec::Learned(spec) => Ok(ContextAdapter::Learned(LearnedAdapter::new(spec.clone(), steps, rng)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    x_proj: Dense,
    class_emb: Embedding,
    c_proj: Dense,
    t_proj: Dense,
    mix: Dense,
    out: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedAdapter {
    spec: LearnedAdapterSpec,
    steps: usize,
    params: ParamSet,
    layout: Layout,
}

impl LearnedAdapter {
    pub fn new<R: Rng + ?Sized>(spec: LearnedAdapterSpec, steps: usize, rng: &mut R) -> Result<Self> {
        if spec.dim == 0 || spec.classes == 0 || spec.hidden == 0 {
            return Err(Error::invalid("adapter dims must be positive"));
        }
        let mut params = ParamSet::new();
        let h = spec.hidden;
        let layout = Layout {
            x_proj: Dense::register(&mut params, "adapter.x_proj", spec.dim, h, rng)?,
            class_emb: Embedding::register(&mut params, "adapter.class_emb", spec.classes, spec.class_dim, rng)?,
            c_proj: Dense::register(&mut params, "adapter.c_proj", spec.class_dim, h, rng)?,
            t_proj: Dense::register(&mut params, "adapter.t_proj", spec.time_dim, h, rng)?,
            mix: Dense::register(&mut params, "adapter.mix", h, h, rng)?,
            out: Dense::register(&mut params, "adapter.out", h, spec.dim, rng)?,
        };
        if spec.output_init == OutputInit::Zero {
            params.set(layout.out.weight_index(), Array2::zeros((h, spec.dim)))?;
        }
        Ok(LearnedAdapter {
            spec,
            steps,
            params,
            layout,
        })
    }

    pub fn spec(&self) -> &LearnedAdapterSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces parameters (e.g. from a checkpoint); names and shapes must match.
    pub fn load_params(&mut self, params: ParamSet) -> Result<()> {
        load_matching(&mut self.params, params)
    }

    fn forward(&self, tape: &mut Tape, p: &BoundParams, x0: Var, classes: &[usize], ts: &[usize]) -> Result<Var> {
        let l = &self.layout;
        let hx = l.x_proj.forward(tape, p, x0)?;
        let emb = l.class_emb.forward(tape, p, classes)?;
        let hc = l.c_proj.forward(tape, p, emb)?;
        let temb = tape.constant(timestep_features(ts, self.steps, self.spec.time_dim));
        let ht = l.t_proj.forward(tape, p, temb)?;
        let inter = tape.mul(hx, hc)?;
        let z = tape.add(inter, ht)?;
        let z = self.spec.activation.apply(tape, z);
        let z = l.mix.forward(tape, p, z)?;
        let z = self.spec.activation.apply(tape, z);
        l.out.forward(tape, p, z)
    }
}

/// Copies `src` into `dst` after checking names and shapes agree.
pub(crate) fn load_matching(dst: &mut ParamSet, src: ParamSet) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            dst.len(),
            src.len()
        )));
    }
    for (i, t) in src.tensors().iter().enumerate() {
        if dst.tensors()[i].name != t.name {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: expected {}, found {}",
                dst.tensors()[i].name,
                t.name
            )));
        }
        dst.set(i, t.value.clone())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextAdapter {
    Zero { dim: usize },
    /// r_φ(x₀, c, t) = coef_t·x₀; `coefs` has one entry (constant) or T + 1.
    LinearToy { dim: usize, coefs: Vec<f64> },
    Learned(LearnedAdapter),
}

impl ContextAdapter {
    pub fn zero(dim: usize) -> Self {
        ContextAdapter::Zero { dim }
    }

    pub fn linear_toy(dim: usize, r: f64) -> Result<Self> {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!("linear adapter coefficient must be >= 0, got {r}")));
        }
        Ok(ContextAdapter::LinearToy { dim, coefs: vec![r] })
    }

    /// Per-timestep coefficients r_0..r_T (or a single constant).
    pub fn linear_toy_schedule(dim: usize, coefs: Vec<f64>, steps: usize) -> Result<Self> {
        if coefs.len() != 1 && coefs.len() != steps + 1 {
            return Err(Error::invalid(format!(
                "linear adapter needs 1 or {} coefficients, got {}",
                steps + 1,
                coefs.len()
            )));
        }
        if let Some(bad) = coefs.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(Error::invalid(format!("linear adapter coefficient must be >= 0, got {bad}")));
        }
        Ok(ContextAdapter::LinearToy { dim, coefs })
    }

    pub fn learned<R: Rng + ?Sized>(spec: LearnedAdapterSpec, steps: usize, rng: &mut R) -> Result<Self> {
        Ok(ContextAdapter::Learned(LearnedAdapter::new(spec, steps, rng)?))
    }

    pub fn spec(&self) -> AdapterSpec {
        match self {
            ContextAdapter::Zero { dim } => AdapterSpec::Zero { dim: *dim },
            ContextAdapter::LinearToy { dim, coefs } => AdapterSpec::LinearToy {
                dim: *dim,
                coefs: coefs.clone(),
            },
            ContextAdapter::Learned(l) => AdapterSpec::Learned(l.spec.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ContextAdapter::Zero { dim } | ContextAdapter::LinearToy { dim, .. } => *dim,
            ContextAdapter::Learned(l) => l.spec.dim,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ContextAdapter::Zero { .. })
    }

    pub fn params(&self) -> Option<&ParamSet> {
        match self {
            ContextAdapter::Learned(l) => Some(&l.params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamSet> {
        match self {
            ContextAdapter::Learned(l) => Some(&mut l.params),
            _ => None,
        }
    }

    fn linear_coef(coefs: &[f64], t: usize) -> f64 {
        if coefs.len() == 1 {
            coefs[0]
        } else {
            coefs[t]
        }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    fn check_classes(&self, classes: &[usize]) -> Result<()> {
        if let ContextAdapter::Learned(l) = self {
            if let Some(&bad) = classes.iter().find(|&&c| c >= l.spec.classes) {
                return Err(Error::Class {
                    class: bad,
                    classes: l.spec.classes,
                });
            }
        }
        Ok(())
    }

    /// r_φ(x₀, c, t) for one item.
    pub fn apply(&self, x0: &[f64], c: Condition, t: usize) -> Result<Vec<f64>> {
        self.check_dim(x0.len())?;
        match self {
            ContextAdapter::Zero { dim } => Ok(vec![0.0; *dim]),
            ContextAdapter::LinearToy { coefs, .. } => {
                let r = Self::linear_coef(coefs, t);
                Ok(x0.iter().map(|x| r * x).collect())
            }
            ContextAdapter::Learned(_) => {
                let x = Array2::from_shape_vec((1, x0.len()), x0.to_vec()).expect("row shape");
                Ok(self.apply_batch(&x, &[c.class], &[t])?.row(0).to_vec())
            }
        }
    }

    /// Row-wise r_φ over a batch.
    pub fn apply_batch(&self, x0: &Mat, classes: &[usize], ts: &[usize]) -> Result<Mat> {
        let mut tape = Tape::new();
        let bound = self.params().map(|p| p.bind_frozen(&mut tape));
        let x = tape.constant(x0.clone());
        let r = self.forward_on_tape(&mut tape, bound.as_ref(), x, classes, ts)?;
        Ok(tape.value(r).clone())
    }

    /// Records r_φ on `tape`. `bound` must come from this adapter's params
    /// when the variant is `Learned`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: Option<&BoundParams>,
        x0: Var,
        classes: &[usize],
        ts: &[usize],
    ) -> Result<Var> {
        let (rows, cols) = tape.value(x0).dim();
        self.check_dim(cols)?;
        if classes.len() != rows || ts.len() != rows {
            return Err(Error::Shape {
                op: "adapter",
                detail: format!("{rows} rows, {} classes, {} timesteps", classes.len(), ts.len()),
            });
        }
        self.check_classes(classes)?;
        match self {
            ContextAdapter::Zero { dim } => Ok(tape.constant(Array2::zeros((rows, *dim)))),
            ContextAdapter::LinearToy { coefs, .. } => {
                let scales = ts.iter().map(|&t| Self::linear_coef(coefs, t)).collect();
                tape.scale_rows(x0, scales)
            }
            ContextAdapter::Learned(l) => {
                let bound = bound.ok_or_else(|| Error::invalid("learned adapter needs bound parameters"))?;
                l.forward(tape, bound, x0, classes, ts)
            }
        }
    }

    /// b_t(x₀, c) = k_t·r_φ(x₀, c, t); zero at t = 0 and t = T.
    pub fn bias(&self, schedule: &NoiseSchedule, x0: &[f64], c: Condition, t: usize) -> Result<Vec<f64>> {
        let k = schedule.context_gain(t)?;
        let r = self.apply(x0, c, t)?;
        Ok(r.into_iter().map(|v| k * v).collect())
    }

    pub fn bias_batch(&self, schedule: &NoiseSchedule, x0: &Mat, classes: &[usize], ts: &[usize]) -> Result<Mat> {
        for &t in ts {
            schedule.check_t(t, 0)?;
        }
        let mut r = self.apply_batch(x0, classes, ts)?;
        for (mut row, &t) in r.rows_mut().into_iter().zip(ts) {
            row *= schedule.gain(t);
        }
        Ok(r)
    }

    /// Empirical lower bound on the Lipschitz constant of x₀ ↦ r_φ(x₀, c, t):
    /// max ‖r(a) − r(b)‖/‖a − b‖ over up to `pairs` sampled pairs, both points
    /// evaluated under the first point's condition.
    pub fn estimate_lipschitz<R: Rng + ?Sized>(
        &self,
        samples: &[(Vec<f64>, Condition)],
        t: usize,
        pairs: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let distinct = samples.windows(2).any(|w| w[0].0 != w[1].0)
            || samples.iter().skip(1).any(|s| s.0 != samples[0].0);
        if samples.len() < 2 || !distinct {
            return Err(Error::invalid("Lipschitz estimate needs at least 2 distinct samples"));
        }
        match self {
            ContextAdapter::Zero { .. } => return Ok(0.0),
            ContextAdapter::LinearToy { coefs, .. } => return Ok(Self::linear_coef(coefs, t).abs()),
            ContextAdapter::Learned(_) => {}
        }
        let n = samples.len();
        let dim = self.dim();
        let mut a_rows = Vec::with_capacity(pairs * dim);
        let mut b_rows = Vec::with_capacity(pairs * dim);
        let mut classes = Vec::with_capacity(pairs);
        let mut gaps = Vec::with_capacity(pairs);
        let mut attempts = 0;
        while gaps.len() < pairs && attempts < pairs * 20 {
            attempts += 1;
            let idx = sample(rng, n, 2);
            let (a, b) = (&samples[idx.index(0)], &samples[idx.index(1)]);
            let gap = dist(&a.0, &b.0);
            if gap == 0.0 {
                continue;
            }
            a_rows.extend_from_slice(&a.0);
            b_rows.extend_from_slice(&b.0);
            classes.push(a.1.class);
            gaps.push(gap);
        }
        let m = gaps.len();
        let ts = vec![t; m];
        let ra = self.apply_batch(&Array2::from_shape_vec((m, dim), a_rows).expect("shape"), &classes, &ts)?;
        let rb = self.apply_batch(&Array2::from_shape_vec((m, dim), b_rows).expect("shape"), &classes, &ts)?;
        let diff = ra - rb;
        Ok(diff
            .axis_iter(Axis(0))
            .zip(&gaps)
            .map(|(row, gap)| row.dot(&row).sqrt() / gap)
            .fold(0.0, f64::max))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::seeded;
    use crate::schedule::ScheduleSpec;

    fn random_learned(seed: u64) -> ContextAdapter {
        let mut spec = LearnedAdapterSpec::new(2, 3);
        spec.output_init = OutputInit::Uniform;
        ContextAdapter::learned(spec, 20, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn zero_adapter_outputs_zero() {
        let a = ContextAdapter::zero(2);
        assert_eq!(a.apply(&[1.0, -3.0], Condition::new(0), 4).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_toy_scales() {
        let a = ContextAdapter::linear_toy(2, 0.2).unwrap();
        assert_eq!(a.apply(&[1.0, -1.0], Condition::new(1), 7).unwrap(), vec![0.2, -0.2]);
        assert!(ContextAdapter::linear_toy(2, -0.1).is_err());
    }

    #[test]
    fn learned_with_zero_params_is_zero() {
        let mut a = random_learned(1);
        let p = a.params_mut().unwrap();
        let zeros = vec![0.0; p.count()];
        p.set_flat(&zeros).unwrap();
        assert_eq!(a.apply(&[0.7, -0.4], Condition::new(2), 3).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn learned_default_init_is_zero_output() {
        let a = ContextAdapter::learned(LearnedAdapterSpec::new(2, 2), 20, &mut seeded(3)).unwrap();
        assert_eq!(a.apply(&[0.7, -0.4], Condition::new(1), 3).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_and_class_errors() {
        let a = random_learned(2);
        assert!(matches!(a.apply(&[1.0], Condition::new(0), 1), Err(Error::Dimension { .. })));
        assert!(matches!(a.apply(&[1.0, 2.0], Condition::new(3), 1), Err(Error::Class { .. })));
    }

    #[test]
    fn deterministic() {
        let a = random_learned(5);
        let x = [0.3, 0.9];
        assert_eq!(a.apply(&x, Condition::new(1), 5).unwrap(), a.apply(&x, Condition::new(1), 5).unwrap());
    }

    #[test]
    fn bias_vanishes_at_ends_and_scales_by_gain() {
        let s = ScheduleSpec::cosine(20).build().unwrap();
        let a = random_learned(4);
        let x = [0.5, -1.5];
        assert_eq!(a.bias(&s, &x, Condition::new(0), 0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(a.bias(&s, &x, Condition::new(0), 20).unwrap(), vec![0.0, 0.0]);
        let r = a.apply(&x, Condition::new(0), 7).unwrap();
        let b = a.bias(&s, &x, Condition::new(0), 7).unwrap();
        for (ri, bi) in r.iter().zip(&b) {
            assert_eq!(*bi, s.gain(7) * ri);
        }
    }

    #[test]
    fn linear_toy_bias_at_quarter_alpha_bar() {
        // k = √0.25·(1 − √0.25) = 0.25, b = 0.25·0.2·x₀
        let k = crate::schedule::gain_from_alpha_bar(0.25);
        let a = ContextAdapter::linear_toy(2, 0.2).unwrap();
        let r = a.apply(&[1.0, 0.0], Condition::new(0), 1).unwrap();
        let b: Vec<f64> = r.iter().map(|v| k * v).collect();
        assert!((b[0] - 0.05).abs() < 1e-15);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn batch_matches_single() {
        let a = random_learned(9);
        let x = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, -1.0, 0.5, 2.0, -0.3]).unwrap();
        let classes = [0, 1, 2];
        let ts = [1, 10, 19];
        let batch = a.apply_batch(&x, &classes, &ts).unwrap();
        for i in 0..3 {
            let single = a.apply(&x.row(i).to_vec(), Condition::new(classes[i]), ts[i]).unwrap();
            assert_eq!(batch.row(i).to_vec(), single);
        }
    }

    #[test]
    fn lipschitz_estimates() {
        let samples: Vec<(Vec<f64>, Condition)> = (0..50)
            .map(|i| (vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()], Condition::new(i % 3)))
            .collect();
        let mut rng = seeded(0);
        assert_eq!(ContextAdapter::zero(2).estimate_lipschitz(&samples, 3, 100, &mut rng).unwrap(), 0.0);
        let lin = ContextAdapter::linear_toy(2, 0.2).unwrap();
        assert_eq!(lin.estimate_lipschitz(&samples, 3, 100, &mut rng).unwrap(), 0.2);
        let learned = random_learned(11);
        let c = learned.estimate_lipschitz(&samples, 3, 500, &mut rng).unwrap();
        assert!(c > 0.0 && c.is_finite());
        let one = vec![(vec![1.0, 1.0], Condition::new(0)), (vec![1.0, 1.0], Condition::new(0))];
        assert!(learned.estimate_lipschitz(&one, 3, 10, &mut rng).is_err());
    }
}
