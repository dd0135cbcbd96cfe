//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Tensors have rank 1 to 4 and strictly positive dimensions. A scalar is a
//! rank-1 tensor of shape `[1]`.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be between 1 and {MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    /// Builds a tensor from data already known to match `shape` and be finite.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Sets the gradient buffer to zeros, allocating it for trainable tensors.
    pub fn zero_grad(&mut self) {
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None if self.requires_grad => self.grad = Some(vec![0.0; self.data.len()]),
            None => {}
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Swaps the last two axes, batched over any leading axes.
pub fn transpose_last_two(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "transpose needs rank >= 2, got {:?}",
            x.shape()
        )));
    }
    let r = x.rank();
    let (a, b) = (x.shape[r - 2], x.shape[r - 1]);
    let mut shape = x.shape.clone();
    shape.swap(r - 2, r - 1);
    Ok(Tensor::from_parts(shape, transpose_batched(&x.data, a, b)))
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// The normalizer is summed in ascending order of the terms, which makes the
/// result independent of how the entries are permuted.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    let mut terms = row.to_vec();
    terms.sort_by(f64::total_cmp);
    let sum: f64 = terms.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Population mean and standard deviation (divisor `N`).
pub fn moments_population(x: &[f64]) -> (f64, f64) {
    assert!(!x.is_empty(), "moments of an empty slice");
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Squared coefficient of variation `(std / mean)^2`, population std.
pub fn cv_squared(x: &[f64]) -> f64 {
    let (mean, std) = moments_population(x);
    if mean == 0.0 {
        return 0.0;
    }
    (std / mean).powi(2)
}

pub(crate) fn transpose_batched(data: &[f64], a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(a * b).zip(out.chunks_mut(a * b)) {
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

/// `out[r, n] = sum_k x[r, k] * w[k, n]`.
///
/// Each output row is reduced in ascending `k` order regardless of how rows
/// are spread across threads, so results do not depend on the worker count.
pub(crate) fn matmul(x: &[f64], w: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    let kernel = |(r, out_row): (usize, &mut [f64])| {
        let x_row = &x[r * inner..(r + 1) * inner];
        for (k, &xv) in x_row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let w_row = &w[k * cols..(k + 1) * cols];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += xv * wv;
            }
        }
    };
    if rows * inner * cols >= PAR_THRESHOLD {
        out.par_chunks_mut(cols).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(cols).enumerate().for_each(kernel);
    }
    out
}

/// `out[r, k] = sum_n g[r, n] * w[k, n]` (gradient w.r.t. the left operand).
pub(crate) fn matmul_bt(g: &[f64], w: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * inner];
    let kernel = |(r, out_row): (usize, &mut [f64])| {
        let g_row = &g[r * cols..(r + 1) * cols];
        for (k, o) in out_row.iter_mut().enumerate() {
            let w_row = &w[k * cols..(k + 1) * cols];
            let mut acc = 0.0;
            for (a, b) in g_row.iter().zip(w_row) {
                acc += a * b;
            }
            *o = acc;
        }
    };
    if rows * inner * cols >= PAR_THRESHOLD {
        out.par_chunks_mut(inner).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(inner).enumerate().for_each(kernel);
    }
    out
}

/// `out[k, n] = sum_r x[r, k] * g[r, n]` (gradient w.r.t. the right operand),
/// reduced in ascending `r` order per output row.
pub(crate) fn matmul_at(x: &[f64], g: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner * cols];
    let kernel = |(k, out_row): (usize, &mut [f64])| {
        for r in 0..rows {
            let xv = x[r * inner + k];
            if xv == 0.0 {
                continue;
            }
            let g_row = &g[r * cols..(r + 1) * cols];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += xv * gv;
            }
        }
    };
    if rows * inner * cols >= PAR_THRESHOLD {
        out.par_chunks_mut(cols).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(cols).enumerate().for_each(kernel);
    }
    out
}
