//! The operation set every forward computation is written against.
//!
//! [`Eager`] evaluates directly on [`Tensor`]s and records nothing, which is
//! the inference path. [`Tape`](super::Tape) evaluates the same kernels and
//! records each op so gradients can be pulled back with `backward`.

use super::tensor::{self, Tensor};
use crate::error::Result;

/// Pointwise unary nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Sigmoid,
    Gelu,
}

impl Unary {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
        }
    }

    pub(crate) fn eval(self, x: &Tensor) -> Result<Tensor> {
        let out = match self {
            Unary::Exp => x.map(f64::exp),
            Unary::Sigmoid => x.map(tensor::sigmoid_scalar),
            Unary::Gelu => x.map(tensor::gelu_scalar),
        };
        tensor::check_finite(self.name(), out)
    }
}

/// Pointwise binary ops with scalar-vs-tensor broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    pub(crate) fn eval(self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let name = self.name();
        match self {
            Binary::Add => tensor::binary(name, a, b, |x, y| x + y),
            Binary::Sub => tensor::binary(name, a, b, |x, y| x - y),
            Binary::Mul => tensor::binary(name, a, b, |x, y| x * y),
        }
    }
}

pub trait Backend {
    type Value: Clone;

    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor) -> Self::Value;
    /// A differentiable input (model parameter or checked input).
    fn param(&mut self, t: Tensor) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn binary(&mut self, op: Binary, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn unary(&mut self, op: Unary, a: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value>;
    fn powf(&mut self, a: &Self::Value, p: f64) -> Result<Self::Value>;
    fn sum(&mut self, a: &Self::Value, axis: Option<usize>) -> Result<Self::Value>;
    fn mean(&mut self, a: &Self::Value, axis: Option<usize>) -> Result<Self::Value>;
    fn add_row(&mut self, x: &Self::Value, v: &Self::Value) -> Result<Self::Value>;
    fn mul_row(&mut self, x: &Self::Value, v: &Self::Value) -> Result<Self::Value>;
    fn slice_rows(&mut self, a: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    fn slice_cols(&mut self, a: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn gather_rows(&mut self, a: &Self::Value, idx: &[usize]) -> Result<Self::Value>;
    /// Per-row standardization without affine terms.
    fn normalize_rows(&mut self, a: &Self::Value, eps: f64) -> Result<Self::Value>;
    fn log_softmax_rows(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn reshape(&mut self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(Binary::Add, a, b)
    }
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(Binary::Sub, a, b)
    }
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(Binary::Mul, a, b)
    }
    fn sigmoid(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(Unary::Sigmoid, a)
    }
    fn gelu(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(Unary::Gelu, a)
    }
    fn exp(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(Unary::Exp, a)
    }

    /// `x·w + b` with `b` broadcast over rows.
    fn linear(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        let xw = self.matmul(x, w)?;
        self.add_row(&xw, b)
    }

    /// Row-wise layer normalization with learned gain and bias.
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        bias: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value> {
        let n = self.normalize_rows(x, eps)?;
        let g = self.mul_row(&n, gain)?;
        self.add_row(&g, bias)
    }
}

/// Graph-free evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Backend for Eager {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul(a, b)
    }
    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        tensor::transpose(a)
    }
    fn binary(&mut self, op: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        op.eval(a, b)
    }
    fn unary(&mut self, op: Unary, a: &Tensor) -> Result<Tensor> {
        op.eval(a)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        tensor::check_finite("scale", a.map(|x| x * c))
    }
    fn powf(&mut self, a: &Tensor, p: f64) -> Result<Tensor> {
        tensor::check_finite("pow", a.map(|x| x.powf(p)))
    }
    fn sum(&mut self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        tensor::reduce_sum(a, axis)
    }
    fn mean(&mut self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        let s = tensor::reduce_sum(a, axis)?;
        let n = tensor::reduced_len(a, axis) as f64;
        Ok(s.map(|x| x / n))
    }
    fn add_row(&mut self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        tensor::add_row(x, v)
    }
    fn mul_row(&mut self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        tensor::mul_row(x, v)
    }
    fn slice_rows(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        tensor::slice_rows(a, start, end)
    }
    fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        tensor::slice_cols(a, start, end)
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        tensor::concat_rows(&refs)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        tensor::concat_cols(&refs)
    }
    fn gather_rows(&mut self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        tensor::gather_rows(a, idx)
    }
    fn normalize_rows(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(tensor::normalize_rows_with_stats(a, eps)?.0)
    }
    fn log_softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        tensor::log_softmax_rows(a)
    }
    fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        tensor::reshape(a, shape)
    }
}
