//! x̂₀-predicting denoiser f_θ(x_t, c, t).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{default_time_dim, load_matching, Condition};
use crate::error::{Error, Result};
use crate::nn::{timestep_features, Activation, BoundParams, Embedding, Mat, Mlp, ParamSet, Tape, Var};
use crate::schedule::NoiseSchedule;

/// Anything that predicts x̂₀ from (x_t, c, t), row-wise over a batch.
pub trait X0Predictor {
    fn dim(&self) -> usize;

    fn predict_batch(&self, x_t: &Mat, classes: &[usize], ts: &[usize]) -> Result<Mat>;

    fn predict(&self, x_t: &[f64], c: Condition, t: usize) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, x_t.len()), x_t.to_vec()).expect("row shape");
        Ok(self.predict_batch(&x, &[c.class], &[t])?.row(0).to_vec())
    }
}

/// Stub predictor that returns known clean samples: row `i` of `rows`, or
/// the single row for every input when only one is given.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownX0 {
    pub rows: Mat,
}

impl KnownX0 {
    pub fn single(x0: &[f64]) -> Self {
        KnownX0 {
            rows: Array2::from_shape_vec((1, x0.len()), x0.to_vec()).expect("row shape"),
        }
    }
}

impl X0Predictor for KnownX0 {
    fn dim(&self) -> usize {
        self.rows.ncols()
    }

    fn predict_batch(&self, x_t: &Mat, _classes: &[usize], _ts: &[usize]) -> Result<Mat> {
        if x_t.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x_t.ncols(),
            });
        }
        match self.rows.nrows() {
            1 => Ok(Array2::from_shape_fn(x_t.dim(), |(_, j)| self.rows[[0, j]])),
            n if n == x_t.nrows() => Ok(self.rows.clone()),
            n => Err(Error::Shape {
                op: "KnownX0",
                detail: format!("{n} known rows for a batch of {}", x_t.nrows()),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub dim: usize,
    pub classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Number of hidden layers.
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_class_dim")]
    pub class_dim: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Skip/output scaling: x̂₀ = c_skip·x_t + c_out·net(c_in·x_t, c, t),
    /// chosen so that the untrained network is the Gaussian-prior estimator
    /// for data of scale `data_scale`.
    #[serde(default = "default_true")]
    pub precondition: bool,
    #[serde(default = "default_data_scale")]
    pub data_scale: f64,
}

fn default_hidden() -> usize {
    64
}

fn default_layers() -> usize {
    2
}

fn default_class_dim() -> usize {
    8
}

fn default_true() -> bool {
    true
}

fn default_data_scale() -> f64 {
    1.0
}

impl DenoiserSpec {
    pub fn new(dim: usize, classes: usize) -> Self {
        DenoiserSpec {
            dim,
            classes,
            hidden: default_hidden(),
            layers: default_layers(),
            class_dim: default_class_dim(),
            time_dim: default_time_dim(),
            activation: Activation::Silu,
            precondition: true,
            data_scale: default_data_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    spec: DenoiserSpec,
    steps: usize,
    alpha_bars: Vec<f64>,
    params: ParamSet,
    class_emb: Embedding,
    mlp: Mlp,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(spec: DenoiserSpec, schedule: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        if spec.dim == 0 || spec.classes == 0 || spec.hidden == 0 {
            return Err(Error::invalid("denoiser dims must be positive"));
        }
        if !(spec.data_scale > 0.0) {
            return Err(Error::invalid("denoiser data_scale must be > 0"));
        }
        let mut params = ParamSet::new();
        let class_emb = Embedding::register(&mut params, "denoiser.class_emb", spec.classes, spec.class_dim, rng)?;
        let mut dims = vec![spec.dim + spec.class_dim + spec.time_dim];
        dims.extend(std::iter::repeat_n(spec.hidden, spec.layers));
        dims.push(spec.dim);
        let mlp = Mlp::register(&mut params, "denoiser.mlp", &dims, spec.activation, rng)?;
        let steps = schedule.steps();
        let alpha_bars = (0..=steps).map(|t| schedule.alpha_bar(t)).collect();
        Ok(Denoiser {
            spec,
            steps,
            alpha_bars,
            params,
            class_emb,
            mlp,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn load_params(&mut self, params: ParamSet) -> Result<()> {
        load_matching(&mut self.params, params)
    }

    /// (c_in, c_skip, c_out) at timestep t.
    pub fn preconditioning(&self, t: usize) -> (f64, f64, f64) {
        if !self.spec.precondition {
            return (1.0, 0.0, 1.0);
        }
        let ab = self.alpha_bars[t];
        let s2 = self.spec.data_scale * self.spec.data_scale;
        let total = ab * s2 + (1.0 - ab);
        let c_in = 1.0 / total.sqrt();
        let c_skip = s2 * ab.sqrt() / total;
        let c_out = self.spec.data_scale * (1.0 - ab).sqrt() / total.sqrt();
        (c_in, c_skip, c_out)
    }

    /// Records f_θ on `tape`; `bound` must come from `self.params()`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x_t: Var,
        classes: &[usize],
        ts: &[usize],
    ) -> Result<Var> {
        let (rows, cols) = tape.value(x_t).dim();
        if cols != self.spec.dim {
            return Err(Error::Dimension {
                expected: self.spec.dim,
                got: cols,
            });
        }
        if classes.len() != rows || ts.len() != rows {
            return Err(Error::Shape {
                op: "denoiser",
                detail: format!("{rows} rows, {} classes, {} timesteps", classes.len(), ts.len()),
            });
        }
        if let Some(&bad) = ts.iter().find(|&&t| t > self.steps) {
            return Err(Error::Timestep {
                t: bad,
                lo: 0,
                hi: self.steps,
            });
        }
        let pre: Vec<_> = ts.iter().map(|&t| self.preconditioning(t)).collect();
        let scaled = tape.scale_rows(x_t, pre.iter().map(|p| p.0).collect())?;
        let emb = self.class_emb.forward(tape, bound, classes)?;
        let temb = tape.constant(timestep_features(ts, self.steps, self.spec.time_dim));
        let input = tape.concat(&[scaled, emb, temb])?;
        let out = self.mlp.forward(tape, bound, input)?;
        if !self.spec.precondition {
            return Ok(out);
        }
        let skip = tape.scale_rows(x_t, pre.iter().map(|p| p.1).collect())?;
        let res = tape.scale_rows(out, pre.iter().map(|p| p.2).collect())?;
        tape.add(skip, res)
    }
}

impl X0Predictor for Denoiser {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn predict_batch(&self, x_t: &Mat, classes: &[usize], ts: &[usize]) -> Result<Mat> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(x_t.clone());
        let y = self.forward_on_tape(&mut tape, &bound, x, classes, ts)?;
        Ok(tape.value(y).clone())
    }
}
