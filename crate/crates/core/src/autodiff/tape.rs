//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! Operations are appended to a [`Tape`] as the forward pass runs; every
//! call returns a [`Var`] handle. [`Tape::backward`] walks the record in
//! reverse and returns a [`Gradients`] table indexed by the same handles.
//! Recording order is a valid topological order, so each node is visited
//! exactly once.

use std::rc::Rc;

use rand::Rng as _;

use super::Tensor;
use crate::error::{contract, Error, Result};
use crate::rng::Rng;
use crate::sparse::Csr;

/// Exponent ceiling applied by [`Tape::exp_clamped`].
pub const EXP_CLAMP: f64 = 50.0;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp { x: Var, clamped: Vec<bool> },
    Recip(Var),
    RowScale(Var, Vec<f64>),
    Spmm { matrix: Rc<Csr>, x: Var, symmetric: bool },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows { base: Var, index: Vec<usize>, src: Var },
    Sum(Var),
    Mean(Var),
    Bce { probs: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_hits: usize,
    spmm_calls: [usize; 2],
    non_finite: Option<String>,
}

/// Probability clamp applied inside [`Tape::bce`].
pub const PROB_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of exponent evaluations that hit [`EXP_CLAMP`].
    pub fn clamp_hits(&self) -> usize {
        self.clamp_hits
    }

    /// Sparse products recorded so far, as (symmetric, general).
    pub fn spmm_calls(&self) -> (usize, usize) {
        (self.spmm_calls[0], self.spmm_calls[1])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First recorded operation whose output held NaN or ±∞. Only tracked
    /// in builds with debug assertions.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && self.non_finite.is_none() && !value.is_finite() {
            let name = format!("{op:?}");
            let end = name.find(['(', ' ', '{']).unwrap_or(name.len());
            self.non_finite = Some(format!("{} at node {}", &name[..end], self.nodes.len()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x + b` with a 1×c row `b` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(b) != (1, cols) {
            return Err(Error::Dimension(format!("bias {:?} for {rows}x{cols}", self.shape(b))));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..rows {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    /// `x + s` for a 1×1 `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Dimension(format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v + sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::AddScalar(x, s), rg))
    }

    /// `x · s` for a 1×1 `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Dimension(format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::MulScalar(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 - v);
        let rg = self.rg(&[x]);
        self.push(value, Op::OneMinus(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// `exp(min(x, EXP_CLAMP))`. Clamped entries pass no gradient and are
    /// tallied in [`Tape::clamp_hits`].
    pub fn exp_clamped(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let clamped: Vec<bool> = input.data().iter().map(|&v| v > EXP_CLAMP).collect();
        let value = input.map(|v| v.min(EXP_CLAMP).exp());
        self.clamp_hits += clamped.iter().filter(|&&c| c).count();
        let rg = self.rg(&[x]);
        self.push(value, Op::Exp { x, clamped }, rg)
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v == 0.0) {
            return Err(contract("reciprocal of zero"));
        }
        let value = self.value(x).map(|v| 1.0 / v);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Recip(x), rg))
    }

    /// Multiplies row `r` of `x` by the constant `factors[r]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let (rows, _) = self.shape(x);
        if factors.len() != rows {
            return Err(Error::Dimension(format!("{} row factors for {rows} rows", factors.len())));
        }
        let mut value = self.value(x).clone();
        for (r, f) in factors.iter().enumerate() {
            for v in value.row_mut(r) {
                *v *= f;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::RowScale(x, factors), rg))
    }

    /// Sparse-times-dense product. `symmetric` lets the backward pass reuse
    /// the matrix instead of its transpose.
    pub fn spmm(&mut self, matrix: Rc<Csr>, x: Var, symmetric: bool) -> Result<Var> {
        let value = matrix.matmul(self.value(x))?;
        self.spmm_calls[usize::from(!symmetric)] += 1;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Spmm { matrix, x, symmetric }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| contract("concat of nothing"))?;
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::Dimension(format!("concat_cols row count {} vs {rows}", self.shape(p).0)));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| contract("concat of nothing"))?;
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p).1 != cols) {
            return Err(Error::Dimension(format!("concat_rows column count {} vs {cols}", self.shape(p).1)));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = parts.iter().map(|&p| self.shape(p).0).sum();
        let value = Tensor::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `index[k]` of `x`, in order. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!("gather row {bad} from {rows} rows")));
        }
        let src = self.value(x);
        let mut value = Tensor::zeros(index.len(), cols);
        for (k, &i) in index.iter().enumerate() {
            value.row_mut(k).copy_from_slice(src.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows(x, index.to_vec()), rg))
    }

    /// Copy of `base` with row `index[k]` replaced by row `k` of `src`.
    /// Rows not listed are copied bit for bit.
    pub fn scatter_rows(&mut self, base: Var, index: &[usize], src: Var) -> Result<Var> {
        let (rows, cols) = self.shape(base);
        if self.shape(src) != (index.len(), cols) {
            return Err(Error::Dimension(format!(
                "scatter {:?} into {rows}x{cols} with {} indices",
                self.shape(src),
                index.len()
            )));
        }
        let mut seen = vec![false; rows];
        for &i in index {
            if i >= rows || std::mem::replace(&mut seen[i], true) {
                return Err(contract(format!("scatter index {i} out of range or repeated")));
            }
        }
        let mut value = self.value(base).clone();
        let s = self.value(src);
        for (k, &i) in index.iter().enumerate() {
            value.row_mut(i).copy_from_slice(s.row(k));
        }
        let rg = self.rg(&[base, src]);
        Ok(self.push(value, Op::ScatterRows { base, index: index.to_vec(), src }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(contract("mean of an empty tensor"));
        }
        let value = Tensor::scalar(self.value(x).sum() / n as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Mean binary cross-entropy of an n×1 probability column against labels.
    /// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` first.
    pub fn bce(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        if p.cols() != 1 || p.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Dimension(format!("bce on {:?} with {} labels", p.shape(), labels.len())));
        }
        let n = labels.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(labels)
            .map(|(&pv, &y)| {
                let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[probs]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { probs, labels: labels.to_vec() }, rg))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1−rate)`;
    /// otherwise the input handle is returned unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = self.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..rows * cols).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let mask = self.constant(Tensor::from_vec(rows, cols, mask)?);
        self.mul(x, mask)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(contract(format!("backward from non-scalar of shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *b, gb);
            }
            Op::AddScalar(x, s) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *s, Tensor::scalar(g.sum()));
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                self.accumulate(grads, *x, g.map(|v| v * sv));
                let gs = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                self.accumulate(grads, *s, Tensor::scalar(gs));
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * f)),
            Op::OneMinus(x) => self.accumulate(grads, *x, g.map(|v| -v)),
            Op::Sigmoid(x) => self.accumulate(grads, *x, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Tanh(x) => self.accumulate(grads, *x, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
            Op::Relu(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))
            }
            Op::Exp { x, clamped } => {
                let mut gx = g.zip_map(out, |gv, y| gv * y);
                for (v, &c) in gx.data_mut().iter_mut().zip(clamped) {
                    if c {
                        *v = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Recip(x) => self.accumulate(grads, *x, g.zip_map(out, |gv, y| -gv * y * y)),
            Op::RowScale(x, factors) => {
                let mut gx = g.clone();
                for (r, f) in factors.iter().enumerate() {
                    for v in gx.row_mut(r) {
                        *v *= f;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Spmm { matrix, x, symmetric } => {
                let gx = if *symmetric {
                    matrix.matmul(g).expect("shape checked in forward")
                } else {
                    matrix.t_matmul(g)
                };
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let mut gp = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    self.accumulate(grads, p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    offset += rows;
                    self.accumulate(grads, p, Tensor::from_vec(rows, cols, slice).expect("sizes match"));
                }
            }
            Op::GatherRows(x, index) => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Tensor::zeros(rows, cols);
                for (k, &i) in index.iter().enumerate() {
                    for (acc, v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterRows { base, index, src } => {
                if self.requires_grad(*src) {
                    let mut gs = Tensor::zeros(index.len(), g.cols());
                    for (k, &i) in index.iter().enumerate() {
                        gs.row_mut(k).copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, *src, gs);
                }
                if self.requires_grad(*base) {
                    let mut gb = g.clone();
                    for &i in index {
                        gb.row_mut(i).fill(0.0);
                    }
                    self.accumulate(grads, *base, gb);
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::Bce { probs, labels } => {
                let n = labels.len() as f64;
                let scale = g.item() / n;
                let gp: Vec<f64> = self
                    .value(*probs)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            return 0.0;
                        }
                        -scale * (y / p - (1.0 - y) / (1.0 - p))
                    })
                    .collect();
                self.accumulate(grads, *probs, Tensor::column(gp));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
