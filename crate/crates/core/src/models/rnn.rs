//! RNN regression: `h_t = tanh(W [h_{t-1}; x_t] + b)`, `ŷ = U h_n + c`,
//! loss `||ŷ − y||²`, written once per instance and once as the
//! hand-batched padded/masked program used as an oracle.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParameterStore};
use crate::kernels::ElemOp;
use crate::tensor::{self, Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RnnDims {
    pub hidden: usize,
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RnnRegressionParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub dims: RnnDims,
}

impl RnnRegressionParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParameterStore<T>, dims: RnnDims, rng: &mut R) -> Self {
        let RnnDims { hidden, input, output } = dims;
        RnnRegressionParams {
            w: store.add_random("rnn.W", Shape::matrix(hidden, hidden + input), rng),
            u: store.add_random("rnn.U", Shape::matrix(output, hidden), rng),
            b: store.add_zeros("rnn.b", Shape::vector(hidden)),
            c: store.add_zeros("rnn.c", Shape::vector(output)),
            dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInstance<T: Real = f64> {
    pub x: Vec<Tensor<T>>,
    pub y: Tensor<T>,
}

pub fn rnn_regression_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    inst: &SequenceInstance<T>,
    params: &RnnRegressionParams,
) -> Result<NodeId> {
    if inst.x.is_empty() {
        return Err(Error::EmptyInput { op: "rnn_regression_loss" });
    }
    let w = g.parameter(store, params.w)?;
    let u = g.parameter(store, params.u)?;
    let b = g.parameter(store, params.b)?;
    let c = g.parameter(store, params.c)?;
    let mut h = g.input(Tensor::zeros(Shape::vector(params.dims.hidden)));
    for x in &inst.x {
        let x = g.input(x.clone());
        let hx = g.concat_rows(&[h, x])?;
        let a = g.affine(w, hx, b)?;
        h = g.tanh(a)?;
    }
    let y_hat = g.affine(u, h, c)?;
    let y = g.input(inst.y.clone());
    g.sq_euclidean(y_hat, y)
}

/// Instances in the padded column layout: `x[t]` is `input × b` with zero
/// columns past each instance's end, `y` is `output × b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch<T: Real = f64> {
    pub x: Vec<Tensor<T>>,
    pub y: Tensor<T>,
    pub lengths: Vec<usize>,
}

pub fn pad_batch<T: Real>(instances: &[SequenceInstance<T>]) -> Result<PaddedBatch<T>> {
    let first = instances.first().ok_or(Error::EmptyInput { op: "pad_batch" })?;
    let d_in = first.x.first().map_or(0, |x| x.shape().numel());
    let d_out = first.y.shape().numel();
    let b = instances.len();
    let n_max = instances.iter().map(|i| i.x.len()).max().unwrap_or(0);
    let mut x = vec![vec![T::zero(); d_in * b]; n_max];
    let mut y = vec![T::zero(); d_out * b];
    let mut lengths = Vec::with_capacity(b);
    for (col, inst) in instances.iter().enumerate() {
        if inst.x.is_empty() {
            return Err(Error::EmptyInput { op: "pad_batch" });
        }
        for (t, xt) in inst.x.iter().enumerate() {
            if xt.shape().numel() != d_in {
                return Err(Error::dims("pad_batch", first.x[0].shape(), xt.shape()));
            }
            for (r, &v) in xt.data().iter().enumerate() {
                x[t][r * b + col] = v;
            }
        }
        if inst.y.shape().numel() != d_out {
            return Err(Error::dims("pad_batch", first.y.shape(), inst.y.shape()));
        }
        for (r, &v) in inst.y.data().iter().enumerate() {
            y[r * b + col] = v;
        }
        lengths.push(inst.x.len());
    }
    Ok(PaddedBatch {
        x: x.into_iter().map(|d| Tensor::new(Shape::matrix(d_in, b), d)).collect::<Result<_>>()?,
        y: Tensor::new(Shape::matrix(d_out, b), y)?,
        lengths,
    })
}

/// The manually batched loss: every step runs on all `b` columns at once
/// and the mask keeps, for each instance, only the step where it ends.
/// Computed eagerly with tensor operations; no graph is involved.
pub fn rnn_regression_batch_loss_manual<T: Real>(
    batch: &PaddedBatch<T>,
    store: &ParameterStore<T>,
    params: &RnnRegressionParams,
) -> Result<T> {
    let n_max = batch.x.len();
    let b = batch.lengths.len();
    if let Some(&bad) = batch.lengths.iter().find(|&&n| n == 0 || n > n_max) {
        return Err(Error::IndexOutOfRange { what: "sequence length", index: bad, size: n_max });
    }
    let w = &store.slot(params.w)?.value;
    let u = &store.slot(params.u)?.value;
    let bias = &store.slot(params.b)?.value;
    let c = &store.slot(params.c)?.value;
    let mut h = Tensor::zeros(Shape::matrix(params.dims.hidden, b));
    let mut total = T::zero();
    for (t, xt) in batch.x.iter().enumerate() {
        let hx = tensor::concat_rows(&[&h, xt])?;
        let pre = tensor::broadcast_add_col(&tensor::matmul(w, &hx)?, bias)?;
        h = tensor::elementwise(ElemOp::Tanh, &[&pre])?;
        let y_hat = tensor::broadcast_add_col(&tensor::matmul(u, &h)?, c)?;
        let d = tensor::elementwise(ElemOp::Sub, &[&y_hat, &batch.y])?;
        let mask: Vec<T> = batch.lengths.iter().map(|&n| if n == t + 1 { T::one() } else { T::zero() }).collect();
        total = total + tensor::masked_frobenius_sq(&d, &Tensor::vector(mask))?.item();
    }
    Ok(total)
}
