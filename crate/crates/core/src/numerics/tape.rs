//! Reverse-mode differentiation over an append-only op record.
//!
//! Nodes are stored in insertion order, which is also a topological order,
//! so `backward` is a single reverse sweep.

use super::backend::{Backend, Binary, Unary};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Pow(Var, f64),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    NormalizeRows(Var, Vec<f64>),
    LogSoftmaxRows(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; nodes the loss does not reach read as zero.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Whether any gradient signal reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.val(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.rg(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let bt = tensor::transpose(self.val(*b))?;
                    self.send(grads, *a, tensor::matmul(g, &bt)?);
                }
                if self.rg(*b) {
                    let at = tensor::transpose(self.val(*a))?;
                    self.send(grads, *b, tensor::matmul(&at, g)?);
                }
            }
            Op::Transpose(a) => self.send(grads, *a, tensor::transpose(g)?),
            Op::Binary(op, a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (ga, gb) = match op {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|x| -x)),
                    Binary::Mul => (
                        tensor::binary("mul", g, bv, |x, y| x * y)?,
                        tensor::binary("mul", g, av, |x, y| x * y)?,
                    ),
                };
                self.send(grads, *a, unbroadcast(ga, av));
                self.send(grads, *b, unbroadcast(gb, bv));
            }
            Op::Unary(op, a) => {
                let x = self.val(*a);
                let local = match op {
                    Unary::Exp => node.value.clone(),
                    Unary::Sigmoid => node.value.map(|s| s * (1.0 - s)),
                    Unary::Gelu => x.map(tensor::gelu_grad_scalar),
                };
                self.send(grads, *a, g.zip_map(&local, |u, l| u * l));
            }
            Op::Scale(a, c) => self.send(grads, *a, g.map(|x| x * c)),
            Op::Pow(a, p) => {
                let x = self.val(*a);
                let local = x.map(|v| p * v.powf(p - 1.0));
                self.send(grads, *a, g.zip_map(&local, |u, l| u * l));
            }
            Op::Sum(a, axis) => {
                let shape = self.val(*a).shape().to_vec();
                self.send(grads, *a, tensor::expand_axis(g, &shape, *axis));
            }
            Op::Mean(a, axis) => {
                let av = self.val(*a);
                let n = tensor::reduced_len(av, *axis) as f64;
                let e = tensor::expand_axis(g, av.shape(), *axis);
                self.send(grads, *a, e.map(|x| x / n));
            }
            Op::AddRow(x, v) => {
                self.send(grads, *x, g.clone());
                if self.rg(*v) {
                    let s = tensor::sum_rows(g);
                    let shape = self.val(*v).shape().to_vec();
                    self.send(grads, *v, Tensor::from_parts(shape, s.into_data()));
                }
            }
            Op::MulRow(x, v) => {
                let (xv, vv) = (self.val(*x), self.val(*v));
                if self.rg(*x) {
                    self.send(grads, *x, tensor::mul_row(g, vv)?);
                }
                if self.rg(*v) {
                    let s = tensor::sum_rows(&g.zip_map(xv, |a, b| a * b));
                    self.send(
                        grads,
                        *v,
                        Tensor::from_parts(vv.shape().to_vec(), s.into_data()),
                    );
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.val(*a);
                let mut out = Tensor::zeros(av.shape());
                let c = av.cols();
                out.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.send(grads, *a, out);
            }
            Op::SliceCols(a, start) => {
                let av = self.val(*a);
                let mut out = Tensor::zeros(av.shape());
                let (c, w) = (av.cols(), g.cols());
                for i in 0..g.rows() {
                    out.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                self.send(grads, *a, out);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let r = self.val(*p).rows();
                    if self.rg(*p) {
                        self.send(grads, *p, tensor::slice_rows(g, offset, offset + r)?);
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.val(*p).cols();
                    if self.rg(*p) {
                        self.send(grads, *p, tensor::slice_cols(g, offset, offset + c)?);
                    }
                    offset += c;
                }
            }
            Op::GatherRows(a, idx) => {
                let av = self.val(*a);
                let mut out = Tensor::zeros(av.shape());
                let c = av.cols();
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.send(grads, *a, out);
            }
            Op::NormalizeRows(a, inv_std) => {
                let y = &node.value;
                let c = y.cols();
                let mut out = vec![0.0; y.numel()];
                for (i, is) in inv_std.iter().enumerate() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        out[i * c + j] = is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.send(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut out = vec![0.0; y.numel()];
                for i in 0..y.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        out[i * c + j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                self.send(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::Reshape(a) => {
                let shape = self.val(*a).shape().to_vec();
                self.send(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
        }
        Ok(())
    }
}

/// Reduces a broadcast gradient back to the operand's shape.
fn unbroadcast(g: Tensor, operand: &Tensor) -> Tensor {
    if g.shape() == operand.shape() {
        g
    } else {
        Tensor::full(operand.shape(), g.data().iter().sum())
    }
}

impl Backend for Tape {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }
    fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::matmul(self.val(*a), self.val(*b))?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(out, Op::MatMul(*a, *b), rg))
    }
    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let out = tensor::transpose(self.val(*a))?;
        Ok(self.push(out, Op::Transpose(*a), self.rg(*a)))
    }
    fn binary(&mut self, op: Binary, a: &Var, b: &Var) -> Result<Var> {
        let out = op.eval(self.val(*a), self.val(*b))?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(out, Op::Binary(op, *a, *b), rg))
    }
    fn unary(&mut self, op: Unary, a: &Var) -> Result<Var> {
        let out = op.eval(self.val(*a))?;
        Ok(self.push(out, Op::Unary(op, *a), self.rg(*a)))
    }
    fn scale(&mut self, a: &Var, c: f64) -> Result<Var> {
        let out = tensor::check_finite("scale", self.val(*a).map(|x| x * c))?;
        Ok(self.push(out, Op::Scale(*a, c), self.rg(*a)))
    }
    fn powf(&mut self, a: &Var, p: f64) -> Result<Var> {
        let out = tensor::check_finite("pow", self.val(*a).map(|x| x.powf(p)))?;
        Ok(self.push(out, Op::Pow(*a, p), self.rg(*a)))
    }
    fn sum(&mut self, a: &Var, axis: Option<usize>) -> Result<Var> {
        let out = tensor::reduce_sum(self.val(*a), axis)?;
        Ok(self.push(out, Op::Sum(*a, axis), self.rg(*a)))
    }
    fn mean(&mut self, a: &Var, axis: Option<usize>) -> Result<Var> {
        let av = self.val(*a);
        let n = tensor::reduced_len(av, axis) as f64;
        let out = tensor::reduce_sum(av, axis)?.map(|x| x / n);
        Ok(self.push(out, Op::Mean(*a, axis), self.rg(*a)))
    }
    fn add_row(&mut self, x: &Var, v: &Var) -> Result<Var> {
        let out = tensor::add_row(self.val(*x), self.val(*v))?;
        let rg = self.rg(*x) || self.rg(*v);
        Ok(self.push(out, Op::AddRow(*x, *v), rg))
    }
    fn mul_row(&mut self, x: &Var, v: &Var) -> Result<Var> {
        let out = tensor::mul_row(self.val(*x), self.val(*v))?;
        let rg = self.rg(*x) || self.rg(*v);
        Ok(self.push(out, Op::MulRow(*x, *v), rg))
    }
    fn slice_rows(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        let out = tensor::slice_rows(self.val(*a), start, end)?;
        Ok(self.push(out, Op::SliceRows(*a, start), self.rg(*a)))
    }
    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        let out = tensor::slice_cols(self.val(*a), start, end)?;
        Ok(self.push(out, Op::SliceCols(*a, start), self.rg(*a)))
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let out = tensor::concat_rows(&refs)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let out = tensor::concat_cols(&refs)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }
    fn gather_rows(&mut self, a: &Var, idx: &[usize]) -> Result<Var> {
        let out = tensor::gather_rows(self.val(*a), idx)?;
        Ok(self.push(out, Op::GatherRows(*a, idx.to_vec()), self.rg(*a)))
    }
    fn normalize_rows(&mut self, a: &Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = tensor::normalize_rows_with_stats(self.val(*a), eps)?;
        Ok(self.push(out, Op::NormalizeRows(*a, inv_std), self.rg(*a)))
    }
    fn log_softmax_rows(&mut self, a: &Var) -> Result<Var> {
        let out = tensor::log_softmax_rows(self.val(*a))?;
        Ok(self.push(out, Op::LogSoftmaxRows(*a), self.rg(*a)))
    }
    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let out = tensor::reshape(self.val(*a), shape)?;
        Ok(self.push(out, Op::Reshape(*a), self.rg(*a)))
    }
}
