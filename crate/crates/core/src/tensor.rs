//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Every kernel reduces each output element in a fixed order that does not
//! depend on how many rows are processed together, so encoding a batch gives
//! bit-identical rows to encoding its members one at a time.

use rayon::prelude::*;

use crate::Real;

/// Work (multiply-adds) above which kernels split output rows across threads.
const PAR_THRESHOLD: usize = 1 << 18;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("shape {shape:?} needs {expected} values, got {actual}")]
pub struct ShapeError {
    pub shape: Vec<usize>,
    pub expected: usize,
    pub actual: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self, ShapeError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(ShapeError {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Row-major matrix. Panics when `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<Real>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn vector(data: Vec<Real>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: Real) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of the trailing dimensions.
    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            if self.shape.is_empty() {
                1
            } else {
                // A 1-D tensor is treated as a single row.
                self.shape[0]
            }
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let c = self.row_width();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Real] {
        let c = self.row_width();
        &mut self.data[i * c..(i + 1) * c]
    }

    fn row_width(&self) -> usize {
        if self.shape.len() <= 1 {
            self.data.len()
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn fill(&mut self, v: Real) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Stacks equally long rows into a matrix.
    pub fn from_rows<R: AsRef<[Real]>>(rows: &[R], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: Real, x: &[Real], y: &mut [Real]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_norm(a: &[Real]) -> Real {
    dot(a, a).sqrt()
}

/// Unit-norm copy of `a`; a zero vector stays zero.
pub fn normalized(a: &[Real]) -> Vec<Real> {
    let n = l2_norm(a);
    if n > 0.0 {
        a.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; a.len()]
    }
}

fn for_rows<F>(out: &mut [Real], width: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [Real]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `out (m×n) += a (m×k) · b (k×n)`.
pub fn matmul_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_rows(out, n, m * k * n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (kk, &coef) in ai.iter().enumerate() {
            axpy(coef, &b[kk * n..(kk + 1) * n], row);
        }
    });
}

/// `out (m×n) += a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_nt_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_rows(out, n, m * k * n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o += dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `out (m×n) += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_tn_acc(a: &[Real], b: &[Real], k: usize, m: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_rows(out, n, m * k * n, |i, row| {
        for kk in 0..k {
            axpy(a[kk * m + i], &b[kk * n..(kk + 1) * n], row);
        }
    });
}

/// Numerically stable softmax over a 1-D slice.
pub fn softmax(logits: &[Real]) -> Result<Vec<Real>, crate::Error> {
    if logits.is_empty() {
        return Err(crate::Error::InvalidArgument(
            "softmax of an empty vector".into(),
        ));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(x: &mut [Real]) {
    let max = x.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(x)` computed with max subtraction.
pub fn log_sum_exp(x: &[Real]) -> Real {
    let max = x.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if max == Real::NEG_INFINITY {
        return max;
    }
    let s: Real = x.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}
