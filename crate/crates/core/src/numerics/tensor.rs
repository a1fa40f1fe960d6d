//! Dense row-major `f64` tensors and the forward kernels shared by every backend.

use crate::error::{Error, Result};

/// Clamp bound applied to the inputs of saturating nonlinearities.
pub const ACTIVATION_CLAMP: f64 = 40.0;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count of a 2-D tensor (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a 2-D tensor (length for vectors).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// In-place `self += other` for equally sized tensors.
    pub(crate) fn accumulate(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn check_finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape.clone(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    check_finite("matmul", Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_2d("transpose", a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Shape resolution for binary pointwise ops: identical shapes, or one side scalar.
pub(crate) fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape == b.shape || b.is_scalar() {
        Ok(a.shape.clone())
    } else if a.is_scalar() {
        Ok(b.shape.clone())
    } else {
        Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

pub(crate) fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(op, a, b)?;
    let data: Vec<f64> = if a.shape == b.shape {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else if b.is_scalar() {
        let y = b.data[0];
        a.data.iter().map(|&x| f(x, y)).collect()
    } else {
        let x = a.data[0];
        b.data.iter().map(|&y| f(x, y)).collect()
    };
    check_finite(op, Tensor::from_parts(shape, data))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    let x = x.clamp(-ACTIVATION_CLAMP, ACTIVATION_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

/// GELU, tanh form. The tanh argument is computed on the clamped input.
pub fn gelu_scalar(x: f64) -> f64 {
    let xc = x.clamp(-ACTIVATION_CLAMP, ACTIVATION_CLAMP);
    0.5 * x * (1.0 + (GELU_K * (xc + GELU_C * xc * xc * xc)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let xc = x.clamp(-ACTIVATION_CLAMP, ACTIVATION_CLAMP);
    let u = GELU_K * (xc + GELU_C * xc * xc * xc);
    let th = u.tanh();
    let inner = if x == xc {
        GELU_K * (1.0 + 3.0 * GELU_C * xc * xc)
    } else {
        0.0
    };
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * inner
}

pub fn reduce_sum(a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::scalar(a.data.iter().sum())),
        Some(ax) if ax >= a.rank() => Err(Error::Axis {
            axis: ax,
            rank: a.rank(),
        }),
        Some(ax) => {
            let outer: usize = a.shape[..ax].iter().product();
            let len = a.shape[ax];
            let inner: usize = a.shape[ax + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += a.data[base + i];
                    }
                }
            }
            let mut shape = a.shape.clone();
            shape.remove(ax);
            Ok(Tensor::from_parts(shape, out))
        }
    }
}

/// Broadcasts a reduced tensor back along `axis` to `shape`.
pub(crate) fn expand_axis(g: &Tensor, shape: &[usize], axis: Option<usize>) -> Tensor {
    match axis {
        None => Tensor::full(shape, g.data[0]),
        Some(ax) => {
            let outer: usize = shape[..ax].iter().product();
            let len = shape[ax];
            let inner: usize = shape[ax + 1..].iter().product();
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    out[base..base + inner].copy_from_slice(&g.data[o * inner..(o + 1) * inner]);
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
    }
}

pub(crate) fn reduced_len(a: &Tensor, axis: Option<usize>) -> usize {
    match axis {
        None => a.numel(),
        Some(ax) => a.shape[ax],
    }
}

fn check_row_vec(op: &'static str, x: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let (r, c) = require_2d(op, x)?;
    if v.numel() != c {
        return Err(Error::Shape {
            op,
            lhs: x.shape.clone(),
            rhs: v.shape.clone(),
        });
    }
    Ok((r, c))
}

/// `x[i, :] + v` for every row.
pub fn add_row(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, c) = check_row_vec("add_row", x, v)?;
    let mut out = x.data.clone();
    for row in out.chunks_mut(c.max(1)) {
        for (o, b) in row.iter_mut().zip(&v.data) {
            *o += b;
        }
    }
    check_finite("add_row", Tensor::from_parts(x.shape.clone(), out))
}

/// `x[i, :] ⊙ v` for every row.
pub fn mul_row(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, c) = check_row_vec("mul_row", x, v)?;
    let mut out = x.data.clone();
    for row in out.chunks_mut(c.max(1)) {
        for (o, g) in row.iter_mut().zip(&v.data) {
            *o *= g;
        }
    }
    check_finite("mul_row", Tensor::from_parts(x.shape.clone(), out))
}

pub(crate) fn sum_rows(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for row in g.data.chunks(c.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![c], out)
}

pub fn slice_rows(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = require_2d("slice_rows", a)?;
    if start > end || end > r {
        return Err(Error::Shape {
            op: "slice_rows",
            lhs: a.shape.clone(),
            rhs: vec![start, end],
        });
    }
    Ok(Tensor::from_parts(
        vec![end - start, c],
        a.data[start * c..end * c].to_vec(),
    ))
}

pub fn slice_cols(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = require_2d("slice_cols", a)?;
    if start > end || end > c {
        return Err(Error::Shape {
            op: "slice_cols",
            lhs: a.shape.clone(),
            rhs: vec![start, end],
        });
    }
    let w = end - start;
    let mut out = Vec::with_capacity(r * w);
    for i in 0..r {
        out.extend_from_slice(&a.data[i * c + start..i * c + end]);
    }
    Ok(Tensor::from_parts(vec![r, w], out))
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let c = parts
        .first()
        .map(|t| t.cols())
        .ok_or_else(|| crate::error::invalid("concat_rows of nothing"))?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, pc) = require_2d("concat_rows", p)?;
        if pc != c {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        rows += r;
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::from_parts(vec![rows, c], data))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let r = parts
        .first()
        .map(|t| t.rows())
        .ok_or_else(|| crate::error::invalid("concat_cols of nothing"))?;
    let mut total = 0;
    for p in parts {
        let (pr, pc) = require_2d("concat_cols", p)?;
        if pr != r {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        total += pc;
    }
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::from_parts(vec![r, total], data))
}

pub fn gather_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (r, c) = require_2d("gather_rows", a)?;
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= r {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: a.shape.clone(),
                rhs: vec![i],
            });
        }
        data.extend_from_slice(a.row(i));
    }
    Ok(Tensor::from_parts(vec![idx.len(), c], data))
}

/// Zero-mean, unit-variance normalization of each row. Returns the
/// normalized rows and the per-row inverse standard deviations.
pub(crate) fn normalize_rows_with_stats(a: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (r, c) = require_2d("normalize_rows", a)?;
    let mut out = vec![0.0; r * c];
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = a.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (x - mean) * is;
        }
        inv_std.push(is);
    }
    let t = check_finite("normalize_rows", Tensor::from_parts(vec![r, c], out))?;
    Ok((t, inv_std))
}

pub fn log_softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (r, c) = require_2d("log_softmax_rows", a)?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = a.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = x - lse;
        }
    }
    check_finite("log_softmax_rows", Tensor::from_parts(vec![r, c], out))
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(Error::Shape {
            op: "reshape",
            lhs: a.shape.clone(),
            rhs: shape.to_vec(),
        });
    }
    Ok(Tensor::from_parts(shape.to_vec(), a.data.clone()))
}
