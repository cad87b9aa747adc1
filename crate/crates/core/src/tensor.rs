//! Dense row-major kernels.
//!
//! Every reduction runs left to right starting from zero, so a row computed
//! alone and the same row computed inside a larger batch are bitwise equal.
//! The model's prefix-isolation and KV-replay guarantees rest on that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<T: Scalar>(&self) -> Mat<T> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| T::of(x.f64())).collect() }
    }
}

/// Left-to-right dot product.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out = x · w` for a single row vector `x` (len `w.rows()`); `out` has len `w.cols()`.
///
/// Each output entry accumulates `x[k] * w[k][j]` for ascending `k`, the same
/// order as [`dot`] against the column.
pub fn vec_mat_into<S: Scalar>(x: &[S], w: &Mat<S>, out: &mut [S]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.iter_mut().for_each(|o| *o = S::zero());
    for (k, &xk) in x.iter().enumerate() {
        let wrow = w.row(k);
        for (o, &wk) in out.iter_mut().zip(wrow) {
            *o += xk * wk;
        }
    }
}

pub fn vec_mat<S: Scalar>(x: &[S], w: &Mat<S>) -> Vec<S> {
    let mut out = vec![S::zero(); w.cols];
    vec_mat_into(x, w, &mut out);
    out
}

/// `out[j] = Σ_k w[j][k] · x[k]`, i.e. `x · wᵀ`. Used by backward passes.
pub fn vec_mat_t<S: Scalar>(x: &[S], w: &Mat<S>) -> Vec<S> {
    debug_assert_eq!(x.len(), w.cols);
    (0..w.rows).map(|j| dot(w.row(j), x)).collect()
}

/// `g += xᵀ · dy` for one row pair (outer product accumulate).
pub fn outer_acc<S: Scalar>(g: &mut Mat<S>, x: &[S], dy: &[S]) {
    debug_assert_eq!(g.rows, x.len());
    debug_assert_eq!(g.cols, dy.len());
    for (k, &xk) in x.iter().enumerate() {
        if xk == S::zero() {
            continue;
        }
        let grow = g.row_mut(k);
        for (gj, &d) in grow.iter_mut().zip(dy) {
            *gj += xk * d;
        }
    }
}

pub fn matmul<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Result<Mat<S>> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let (start, end) = (i * b.cols, (i + 1) * b.cols);
        vec_mat_into(a.row(i), b, &mut out.data[start..end]);
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("matmul"));
    }
    Ok(out)
}

/// Row-wise softmax restricted to visible entries. Invisible entries come out
/// as exactly zero and do not take part in any reduction.
pub fn masked_softmax_rows<S: Scalar>(scores: &Mat<S>, visible: &[bool]) -> Result<Mat<S>> {
    if visible.len() != scores.len() {
        return Err(Error::Shape(format!(
            "mask has {} entries for a {}x{} score matrix",
            visible.len(),
            scores.rows,
            scores.cols
        )));
    }
    let mut out = Mat::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        let row = scores.row(i);
        let vis = &visible[i * scores.cols..(i + 1) * scores.cols];
        let mut max = S::neg_infinity();
        for (&s, &v) in row.iter().zip(vis) {
            if v && s > max {
                max = s;
            }
        }
        if max == S::neg_infinity() {
            if vis.iter().any(|&v| v) {
                return Err(Error::NonFinite("masked_softmax_rows"));
            }
            return Err(Error::FullyMasked(i));
        }
        let orow = out.row_mut(i);
        let mut sum = S::zero();
        for ((o, &s), &v) in orow.iter_mut().zip(row).zip(vis) {
            if v {
                *o = (s - max).exp();
                sum += *o;
            }
        }
        for (o, &v) in orow.iter_mut().zip(vis) {
            if v {
                *o /= sum;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("masked_softmax_rows"));
    }
    Ok(out)
}

/// In-place softmax over a full slice with max subtraction.
pub fn softmax_in_place<S: Scalar>(v: &mut [S]) {
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(v)` with max subtraction.
pub fn log_sum_exp<S: Scalar>(v: &[S]) -> S {
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for &x in v {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

/// Root-mean-square normalization: `x / sqrt(mean(x²) + eps) * gain`.
pub fn rmsnorm<S: Scalar>(row: &[S], gain: &[S], eps: S) -> Vec<S> {
    let mut out = vec![S::zero(); row.len()];
    rmsnorm_into(row, gain, eps, &mut out);
    out
}

/// Writes the normalized row into `out` and returns the reciprocal RMS.
pub fn rmsnorm_into<S: Scalar>(row: &[S], gain: &[S], eps: S, out: &mut [S]) -> S {
    debug_assert_eq!(row.len(), gain.len());
    let mut ss = S::zero();
    for &x in row {
        ss += x * x;
    }
    let inv = S::one() / (ss / S::of(row.len() as f64) + eps).sqrt();
    for ((o, &x), &g) in out.iter_mut().zip(row).zip(gain) {
        *o = x * inv * g;
    }
    inv
}

/// Backward of [`rmsnorm_into`]: returns `dx`, accumulating `dgain` when given.
pub fn rmsnorm_backward<S: Scalar>(
    row: &[S],
    gain: &[S],
    inv_rms: S,
    dy: &[S],
    dgain: Option<&mut [S]>,
) -> Vec<S> {
    let n = S::of(row.len() as f64);
    let mut gdy_x = S::zero();
    for ((&x, &g), &d) in row.iter().zip(gain).zip(dy) {
        gdy_x += g * d * x;
    }
    let coeff = gdy_x * inv_rms * inv_rms * inv_rms / n;
    if let Some(dg) = dgain {
        for ((dgi, &x), &d) in dg.iter_mut().zip(row).zip(dy) {
            *dgi += d * x * inv_rms;
        }
    }
    row.iter()
        .zip(gain)
        .zip(dy)
        .map(|((&x, &g), &d)| g * d * inv_rms - x * coeff)
        .collect()
}

/// Smallest index attaining the maximum.
pub fn argmax_tiebreak_low<S: PartialOrd + Copy>(v: &[S]) -> usize {
    assert!(!v.is_empty(), "argmax of an empty slice");
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_SQRT_2_OVER_PI);
    let a = S::of(GELU_CUBIC);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_SQRT_2_OVER_PI);
    let a = S::of(GELU_CUBIC);
    let half = S::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}
