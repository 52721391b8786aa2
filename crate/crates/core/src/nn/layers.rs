use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{embedding_normal, fan_in_uniform, BoundParams, ParamSet};
use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// y = x·W + b with W of shape (input, output).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    weight: usize,
    bias: usize,
}

impl Dense {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.push(format!("{name}.weight"), fan_in_uniform(rng, input, output))?;
        let bias = params.push(format!("{name}.bias"), Array2::zeros((1, output)))?;
        Ok(Dense {
            input,
            output,
            weight,
            bias,
        })
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.weight))?;
        tape.add_bias(h, p.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding {
    pub rows: usize,
    pub dim: usize,
    table: usize,
}

impl Embedding {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = params.push(format!("{name}.table"), embedding_normal(rng, rows, dim))?;
        Ok(Embedding { rows, dim, table })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, ids: &[usize]) -> Result<Var> {
        tape.gather(p.var(self.table), ids.to_vec())
    }
}

/// Stack of dense layers with an activation between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output dims"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::register(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let cols = tape.value(x).ncols();
        if cols != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: cols,
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

/// Forward an MLP on a batch of inputs; returns the tape for a later backward.
pub fn forward_mlp(mlp: &Mlp, params: &ParamSet, inputs: Mat) -> Result<(Mat, Tape, Var)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.input(inputs);
    let y = mlp.forward(&mut tape, &bound, x)?;
    Ok((tape.value(y).clone(), tape, y))
}

/// Sinusoidal features of t/T: [sin(ω_i·τ), cos(ω_i·τ)] with τ = 1000·t/T and
/// ω_i = 10000^(−i/half).
pub fn timestep_features(ts: &[usize], steps: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Array2::zeros((ts.len(), dim));
    for (r, &t) in ts.iter().enumerate() {
        let tau = 1000.0 * t as f64 / steps as f64;
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            let angle = tau * freq;
            out[[r, i]] = angle.sin();
            out[[r, half + i]] = angle.cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::seeded;
    use ndarray::array;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut params = ParamSet::new();
        let mlp = Mlp::register(&mut params, "m", &[3, 3], Activation::Silu, &mut seeded(0)).unwrap();
        params.set(mlp.layers[0].weight_index(), Array2::eye(3)).unwrap();
        let x = array![[1.0, -2.0, 0.5]];
        let (y, _, _) = forward_mlp(&mlp, &params, x.clone()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_affine() {
        let mut params = ParamSet::new();
        let mlp = Mlp::register(&mut params, "m", &[1, 1], Activation::Silu, &mut seeded(0)).unwrap();
        params.set(mlp.layers[0].weight_index(), array![[2.0]]).unwrap();
        params.set(mlp.layers[0].bias_index(), array![[0.5]]).unwrap();
        let (y, _, _) = forward_mlp(&mlp, &params, array![[3.0]]).unwrap();
        assert_eq!(y[[0, 0]], 6.5);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut params = ParamSet::new();
            let mlp = Mlp::register(&mut params, "m", &[2, 8, 2], Activation::Silu, &mut seeded(42)).unwrap();
            forward_mlp(&mlp, &params, array![[0.3, -0.7]]).unwrap().0
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut params = ParamSet::new();
        let mlp = Mlp::register(&mut params, "m", &[2, 2], Activation::Silu, &mut seeded(0)).unwrap();
        assert!(forward_mlp(&mlp, &params, array![[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn timestep_features_shape() {
        let f = timestep_features(&[0, 5, 10], 10, 16);
        assert_eq!(f.dim(), (3, 16));
        assert_eq!(f[[0, 0]], 0.0);
        assert_eq!(f[[0, 8]], 1.0);
    }
}
