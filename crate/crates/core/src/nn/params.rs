use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tape::{Gradients, Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Mat,
}

/// Named parameter tensors. Every tensor is 2-D; biases are 1×n.
///
/// `version` is bumped on every mutation so gradients recorded against an
/// older version are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: Vec<NamedTensor>,
    version: u64,
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            tensors: Vec::new(),
            version: 0,
        }
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> Result<usize> {
        let name = name.into();
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.tensors.push(NamedTensor { name, value });
        self.version += 1;
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, idx: usize) -> &Mat {
        &self.tensors[idx].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    /// Mutable access to one tensor; bumps the version.
    pub fn get_mut(&mut self, idx: usize) -> &mut Mat {
        self.version += 1;
        &mut self.tensors[idx].value
    }

    /// Replaces a tensor's values; the shape must not change.
    pub fn set(&mut self, idx: usize, value: Mat) -> Result<()> {
        let cur = &self.tensors[idx];
        if cur.value.dim() != value.dim() {
            return Err(Error::Shape {
                op: "ParamSet::set",
                detail: format!("{}: {:?} vs {:?}", cur.name, cur.value.dim(), value.dim()),
            });
        }
        self.get_mut(idx).assign(&value);
        Ok(())
    }

    /// Scalar views in tensor order, for finite-difference probing.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.value.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.count() {
            return Err(Error::Dimension {
                expected: self.count(),
                got: values.len(),
            });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.value.len();
            for (dst, src) in t.value.iter_mut().zip(&values[off..off + n]) {
                *dst = *src;
            }
            off += n;
        }
        self.version += 1;
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    value: Array2::zeros(t.value.dim()),
                })
                .collect(),
            version: 0,
        }
    }

    /// Records every tensor as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.input(t.value.clone()))
                .collect(),
            version: self.version,
        }
    }

    /// Records every tensor as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.constant(t.value.clone()))
                .collect(),
            version: self.version,
        }
    }
}

/// A parameter set's leaves on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    version: u64,
}

impl BoundParams {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    /// Gradients aligned with the parameter set; unreached tensors get zeros.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            tensors: self
                .vars
                .iter()
                .map(|&v| {
                    grads
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| Array2::zeros(tape.value(v).dim()))
                })
                .collect(),
            version: self.version,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Mat>,
    pub version: u64,
}

impl ParamGrads {
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    /// Adds `other` into `self` (same layout).
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            *t *= s;
        }
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) dense weights.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

/// N(0, 0.02²) embedding table.
pub fn embedding_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let dist = Normal::new(0.0, 0.02).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}
