//! Reverse-mode differentiation over batched matrices.
//!
//! A [`Tape`] records one forward evaluation. Rows are batch items, columns
//! are features. Leaves are either constants or gradient-carrying inputs.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    Tanh(Var),
    ScaleRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    RowSqNorm(Var),
    WeightedSum(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", av, bv));
        }
        let value = av.dot(bv);
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    /// `a + bias` with a 1×m bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.nrows() != 1 || av.ncols() != bv.ncols() {
            return Err(shape_err("add_bias", av, bv));
        }
        let value = av + bv;
        let g = self.grad_flag(&[a, bias]);
        Ok(self.push(value, Op::AddBias(a, bias), g))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let g = self.grad_flag(&[a]);
        self.push(value, Op::Silu(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let g = self.grad_flag(&[a]);
        self.push(value, Op::Tanh(a), g)
    }

    /// Row `i` multiplied by `scales[i]`.
    pub fn scale_rows(&mut self, a: Var, scales: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if scales.len() != av.nrows() {
            return Err(Error::Shape {
                op: "scale_rows",
                detail: format!("{} scales for {} rows", scales.len(), av.nrows()),
            });
        }
        let mut value = av.clone();
        for (mut row, &s) in value.rows_mut().into_iter().zip(&scales) {
            row *= s;
        }
        let g = self.grad_flag(&[a]);
        Ok(self.push(value, Op::ScaleRows(a, scales), g))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.nrows()) {
            return Err(Error::Class {
                class: bad,
                classes: tv.nrows(),
            });
        }
        let value = tv.select(Axis(0), &ids);
        let g = self.grad_flag(&[table]);
        Ok(self.push(value, Op::Gather(table, ids), g))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape {
            op: "concat",
            detail: e.to_string(),
        })?;
        let g = self.grad_flag(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), g))
    }

    /// n×m → n×1 of squared row norms.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r))
            .insert_axis(Axis(1));
        let g = self.grad_flag(&[a]);
        self.push(value, Op::RowSqNorm(a), g)
    }

    /// n×1 → 1×1 of Σ w_i·a_i, summed in row order.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if av.ncols() != 1 || av.nrows() != weights.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                detail: format!("{:?} with {} weights", av.dim(), weights.len()),
            });
        }
        let mut acc = 0.0;
        for (x, w) in av.column(0).iter().zip(&weights) {
            acc += w * x;
        }
        let g = self.grad_flag(&[a]);
        Ok(self.push(Array2::from_elem((1, 1), acc), Op::WeightedSum(a, weights), g))
    }

    /// Gradients of a scalar (1×1) output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let ov = self.value(output);
        if ov.dim() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("output must be 1x1, got {:?}", ov.dim()),
            });
        }
        self.backward_with(output, Array2::from_elem((1, 1), 1.0))
    }

    /// Vector-Jacobian product with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Mat) -> Result<Gradients> {
        if seed.dim() != self.value(output).dim() {
            return Err(shape_err("backward", self.value(output), &seed));
        }
        let mut grads: Vec<Option<Mat>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            // Leaves keep their accumulated gradient for the caller.
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&self.nodes, &mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&self.nodes, &mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddBias(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&self.nodes, &mut grads, *bias, gb);
                    accumulate(&self.nodes, &mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&self.nodes, &mut grads, *b, g.clone());
                    accumulate(&self.nodes, &mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&self.nodes, &mut grads, *b, -&g);
                    accumulate(&self.nodes, &mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    accumulate(&self.nodes, &mut grads, *a, &g * self.value(*b));
                    accumulate(&self.nodes, &mut grads, *b, &g * self.value(*a));
                }
                Op::Silu(a) => {
                    let mut ga = self.value(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    ga *= &g;
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = node.value.mapv(|y| 1.0 - y * y);
                    ga *= &g;
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::ScaleRows(a, scales) => {
                    let mut ga = g;
                    for (mut row, &s) in ga.rows_mut().into_iter().zip(scales) {
                        row *= s;
                    }
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    accumulate(&self.nodes, &mut grads, *table, gt);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&self.nodes, &mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::RowSqNorm(a) => {
                    let mut ga = self.value(*a) * 2.0;
                    for (mut row, &gi) in ga.rows_mut().into_iter().zip(g.column(0)) {
                        row *= gi;
                    }
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::WeightedSum(a, weights) => {
                    let g0 = g[[0, 0]];
                    let ga = Array2::from_shape_fn((weights.len(), 1), |(r, _)| weights[r] * g0);
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Mat>], v: Var, g: Mat) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn shape_err(op: &'static str, a: &Mat, b: &Mat) -> Error {
    Error::Shape {
        op,
        detail: format!("{:?} vs {:?}", a.dim(), b.dim()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient reaching `v`, if any path connects it to the output.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
