//! Dense row-major tensors and the plain (non-recording) kernels behind them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Epsilon added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Immutable-by-convention dense tensor. `shape.iter().product() == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Real = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[S]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::ONE;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D view: everything but the last axis collapsed.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, format!("expected a matrix, got shape {:?}", other))),
        }
    }

    /// Standard matrix product `self[m×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = rhs.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dims differ: {}x{} · {}x{}", m, k, k2, n),
            ));
        }
        let mut out = vec![S::ZERO; m * n];
        gemm_nn(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_2d("transpose")?;
        let mut out = vec![S::ZERO; r * c];
        transpose_into(&self.data, &mut out, r, c);
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Self> {
        let k = self.cols();
        if k == 0 {
            return Err(Error::dim("softmax", "last axis is empty"));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Row-wise normalization to zero mean and unit variance, then `gain * x + bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self) -> Result<Self> {
        let d = self.cols();
        if d == 0 || gain.len() != d || bias.len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!("width {} with gain {} / bias {}", d, gain.len(), bias.len()),
            ));
        }
        let mut out = vec![S::ZERO; self.data.len()];
        for (x, y) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, inv_std) = row_moments(x);
            for j in 0..d {
                let xhat = (x[j].to_f64() - mean) * inv_std;
                y[j] = S::from_f64(xhat) * gain.data[j] + bias.data[j];
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// Mean and `1/sqrt(var + eps)` of a row, accumulated in f64.
pub(crate) fn row_moments<S: Real>(x: &[S]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|v| {
            let c = v.to_f64() - mean;
            c * c
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / libm::sqrt(var + LAYER_NORM_EPS))
}

/// Max-shifted softmax of one row, normalized with an f64 sum.
pub(crate) fn softmax_in_place<S: Real>(row: &mut [S]) {
    let max = row
        .iter()
        .copied()
        .fold(row[0], |m, v| if v > m { v } else { m });
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.to_f64();
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = S::from_f64(v.to_f64() * inv);
    }
}

/// `ln softmax(row)`, i.e. `x - max - ln Σ exp(x - max)`.
pub(crate) fn log_softmax_in_place<S: Real>(row: &mut [S]) {
    let max = row
        .iter()
        .copied()
        .fold(row[0], |m, v| if v > m { v } else { m })
        .to_f64();
    let sum: f64 = row.iter().map(|v| libm::exp(v.to_f64() - max)).sum();
    let lse = max + libm::log(sum);
    for v in row.iter_mut() {
        *v = S::from_f64(v.to_f64() - lse);
    }
}

pub(crate) fn transpose_into<S: Real>(a: &[S], out: &mut [S], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

fn check_gemm(a: usize, b: usize, out: usize, (ea, eb, eo): (usize, usize, usize)) {
    assert!(a >= ea && b >= eb && out >= eo, "gemm operand too short");
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    check_gemm(a.len(), b.len(), out.len(), (m * k, k * n, m * n));
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: lengths checked above; `out` is a distinct mutable borrow.
    unsafe { S::gemm_acc(m, k, n, a.as_ptr(), k_, 1, b.as_ptr(), n_, 1, out.as_mut_ptr(), n_, 1) }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    check_gemm(a.len(), b.len(), out.len(), (m * k, k * n, m * n));
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as in `gemm_nn`.
    unsafe { S::gemm_acc(m, k, n, a.as_ptr(), k_, 1, b.as_ptr(), 1, k_, out.as_mut_ptr(), n_, 1) }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    check_gemm(a.len(), b.len(), out.len(), (m * k, m * n, k * n));
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as in `gemm_nn`.
    unsafe { S::gemm_acc(k, m, n, a.as_ptr(), 1, k_, b.as_ptr(), n_, 1, out.as_mut_ptr(), n_, 1) }
}
