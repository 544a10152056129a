//! Numerically stable primitives shared by every other module.
//!
//! All arithmetic is f64. Reductions run left to right so repeated runs
//! are bitwise reproducible. Everything here is a pure function; calling
//! from multiple threads is safe.

use thiserror::Error;

/// Threshold below which a vector norm is treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NumError {
    #[error("vector norm below {ZERO_NORM_EPS:e}, cannot normalize")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value encountered")]
    NonFinite,
}

/// Dense row-major matrix of f64. No norm constraints; used for similarity
/// tables, parameter tensors and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::DimMismatch { left: data.len(), right: rows * cols });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Row-major bank of unit-norm feature vectors (image features, text
/// features, "no" text features).
///
/// Invariants: at least one row, dimension at least 2, all entries finite,
/// every row within 1e-6 of unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    inner: Matrix,
}

impl EmbeddingMatrix {
    /// Wraps rows that are already unit norm. Rejects rows whose norm
    /// deviates from 1 by more than 1e-6.
    pub fn from_unit_rows(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, NumError> {
        let m = Matrix::from_vec(rows, dim, data)?;
        Self::validate(&m)?;
        for i in 0..rows {
            let n = norm(m.row(i));
            if (n - 1.0).abs() > 1e-6 {
                return Err(NumError::NonFinite);
            }
        }
        Ok(EmbeddingMatrix { inner: m })
    }

    /// Normalizes each row to unit norm. Errors on any near-zero row.
    pub fn normalize_rows(m: Matrix) -> Result<Self, NumError> {
        Self::validate(&m)?;
        let mut m = m;
        for i in 0..m.rows() {
            let r = l2_normalize(m.row(i))?;
            m.row_mut(i).copy_from_slice(&r);
        }
        Ok(EmbeddingMatrix { inner: m })
    }

    fn validate(m: &Matrix) -> Result<(), NumError> {
        if m.rows() < 1 {
            return Err(NumError::EmptyInput);
        }
        if m.cols() < 2 {
            return Err(NumError::DimMismatch { left: m.cols(), right: 2 });
        }
        if m.data().iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite);
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.inner.rows()
    }

    pub fn dim(&self) -> usize {
        self.inner.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.inner.row(i)
    }

    pub fn data(&self) -> &[f64] {
        self.inner.data()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.inner
    }
}

/// Inner product, summed left to right.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit L2 norm, preserving direction.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, NumError> {
    if v.is_empty() {
        return Err(NumError::EmptyInput);
    }
    let n = norm(v);
    if n < ZERO_NORM_EPS {
        return Err(NumError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Pairwise inner products: entry (i, j) is `<a_i, b_j>`.
pub fn similarity_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<Matrix, NumError> {
    if a.dim() != b.dim() {
        return Err(NumError::DimMismatch { left: a.dim(), right: b.dim() });
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, dot(a.row(i), b.row(j)));
        }
    }
    Ok(out)
}

/// Temperature-scaled softmax with max subtraction. Shift-invariant and
/// overflow-safe for arbitrarily large logits.
pub fn stable_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>, NumError> {
    if logits.is_empty() {
        return Err(NumError::EmptyInput);
    }
    if !(tau > 0.0) {
        return Err(NumError::NonPositiveTau(tau));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumError::NonFinite);
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / z).collect())
}

/// log(sum(exp(logits))) with max factoring.
pub fn logsumexp(logits: &[f64]) -> Result<f64, NumError> {
    if logits.is_empty() {
        return Err(NumError::EmptyInput);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumError::NonFinite);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

/// Overflow-safe logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) without intermediate underflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
