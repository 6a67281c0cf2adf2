//! Dense row-major tensors (rank 1 or 2) and the checked tensor-level ops.
//!
//! A rank-1 tensor of length `d` behaves as a `d×1` column wherever a matrix
//! is expected. A scalar is the rank-1 shape `[1]`.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ElemOp};

/// Element type of every tensor. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    dims: [usize; 2],
    rank: u8,
}

impl Shape {
    pub fn vector(d: usize) -> Self {
        Shape { dims: [d, 1], rank: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { dims: [rows, cols], rank: 2 }
    }

    pub fn scalar() -> Self {
        Shape::vector(1)
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        let shape = match *dims {
            [d] => Shape::vector(d),
            [r, c] => Shape::matrix(r, c),
            _ => {
                return Err(Error::Contract(format!("unsupported rank {}", dims.len())));
            }
        };
        if dims.contains(&0) {
            return Err(Error::InvalidShape { op: "shape", shape, reason: "zero-sized dimension".into() });
        }
        Ok(shape)
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank()]
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Columns; 1 for a vector.
    pub fn cols(&self) -> usize {
        self.dims[1]
    }

    pub fn numel(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.rank == 1 && self.dims[0] == 1
    }

    pub fn is_vector(&self) -> bool {
        self.rank == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rank {
            1 => write!(f, "{}", self.dims[0]),
            _ => write!(f, "{}x{}", self.dims[0], self.dims[1]),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{self}]")
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::InvalidShape { op: "tensor", shape, reason: "zero-sized dimension".into() });
        }
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("{} values supplied", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.numel()] }
    }

    pub fn vector(data: Vec<T>) -> Self {
        let shape = Shape::vector(data.len());
        Tensor::new(shape, data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(Shape::matrix(rows, cols), data)
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![v] }
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(Shape::matrix(n, n));
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.shape.cols() + col]
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::dims("reshape", self.shape, shape));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        if kernels::all_finite(&self.data) {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

/// Matrix product; a rank-1 right operand is treated as a column and the
/// result is then rank 1.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.rank() != 2 || sa.cols() != sb.rows() {
        return Err(Error::dims("matmul", sa, sb));
    }
    let (m, k, n) = (sa.rows(), sa.cols(), sb.cols());
    let shape = if sb.is_vector() { Shape::vector(m) } else { Shape::matrix(m, n) };
    let mut out = Tensor::zeros(shape);
    kernels::gemm(m, k, n, a.data(), b.data(), out.data_mut(), false);
    out.checked("matmul")
}

pub fn elementwise<T: Real>(op: ElemOp, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.len() != op.arity() {
        return Err(Error::Arity { op: op.name(), expected: op.arity().to_string(), got: inputs.len() });
    }
    let x = inputs[0];
    let mut out = Tensor::zeros(x.shape());
    if op.arity() == 1 {
        if op == ElemOp::Log {
            if let Some(v) = x.data().iter().find(|v| **v <= T::zero()) {
                return Err(Error::Domain { op: "log", reason: format!("non-positive input {v}") });
            }
        }
        kernels::unary(op, x.data(), out.data_mut());
    } else {
        let y = inputs[1];
        if x.shape() != y.shape() {
            return Err(Error::dims(op.name(), x.shape(), y.shape()));
        }
        kernels::binary(op, x.data(), y.data(), out.data_mut());
    }
    out.checked(op.name())
}

/// Adds `v` to every column of `m`.
pub fn broadcast_add_col<T: Real>(m: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if !v.shape().is_vector() || v.shape().rows() != m.shape().rows() {
        return Err(Error::dims("broadcast_add_col", m.shape(), v.shape()));
    }
    let cols = m.shape().cols();
    let mut out = m.clone();
    for (i, row) in out.data_mut().chunks_mut(cols).enumerate() {
        let b = v.data()[i];
        row.iter_mut().for_each(|x| *x = *x + b);
    }
    out.checked("broadcast_add_col")
}

pub fn concat_cols<T: Real>(ts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = ts.first().ok_or(Error::EmptyInput { op: "concat_cols" })?;
    let rows = first.shape().rows();
    if let Some(bad) = ts.iter().find(|t| t.shape().rows() != rows) {
        return Err(Error::dims("concat_cols", first.shape(), bad.shape()));
    }
    let total: usize = ts.iter().map(|t| t.shape().cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for t in ts {
            let c = t.shape().cols();
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
    }
    Tensor::new(Shape::matrix(rows, total), data)
}

/// Inverse of [`concat_cols`]. Width-1 pieces come back as rank-2 `d×1`.
pub fn split_cols<T: Real>(t: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (rows, cols) = (t.shape().rows(), t.shape().cols());
    if widths.iter().sum::<usize>() != cols || widths.contains(&0) {
        return Err(Error::InvalidShape {
            op: "split_cols",
            shape: t.shape(),
            reason: format!("widths {widths:?} do not partition the columns"),
        });
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(widths.len());
    for &w in widths {
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&t.data()[i * cols + start..i * cols + start + w]);
        }
        out.push(Tensor::new(Shape::matrix(rows, w), data)?);
        start += w;
    }
    Ok(out)
}

/// Stacks tensors vertically; all must share the column count. Vectors stay vectors.
pub fn concat_rows<T: Real>(ts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = ts.first().ok_or(Error::EmptyInput { op: "concat_rows" })?;
    let rank = first.shape().rank();
    let cols = first.shape().cols();
    if let Some(bad) = ts.iter().find(|t| t.shape().rank() != rank || t.shape().cols() != cols) {
        return Err(Error::dims("concat_rows", first.shape(), bad.shape()));
    }
    let rows: usize = ts.iter().map(|t| t.shape().rows()).sum();
    let data: Vec<T> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let shape = if rank == 1 { Shape::vector(rows) } else { Shape::matrix(rows, cols) };
    Tensor::new(shape, data)
}

pub fn sq_euclidean<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dims("sq_euclidean", a.shape(), b.shape()));
    }
    Tensor::scalar(kernels::sum_sq_diff(a.data(), b.data())).checked("sq_euclidean")
}

/// `||d · diag(mask)||_F^2`: columns whose mask entry is 0 drop out of the sum.
pub fn masked_frobenius_sq<T: Real>(d: &Tensor<T>, mask_col: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = (d.shape().rows(), d.shape().cols());
    if !mask_col.shape().is_vector() || mask_col.shape().rows() != cols {
        return Err(Error::dims("masked_frobenius_sq", d.shape(), mask_col.shape()));
    }
    if let Some(m) = mask_col.data().iter().find(|m| **m != T::zero() && **m != T::one()) {
        return Err(Error::Domain { op: "masked_frobenius_sq", reason: format!("mask entry {m} not in {{0,1}}") });
    }
    Tensor::scalar(kernels::masked_sum_sq(rows, cols, d.data(), mask_col.data())).checked("masked_frobenius_sq")
}

/// Largest elementwise difference scaled by the larger of the two max norms:
/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, or 0 when both are zero. Lengths must match.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_diff: length mismatch");
    let norm = |x: &[f64]| x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        return 0.0;
    }
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}
