//! Minimal dense linear algebra and activation kernels for the neural layers.
//!
//! Everything is 64-bit, row-major and allocation-light. There is no BLAS:
//! the loops are plain Rust with contiguous inner strides, so results are
//! bit-reproducible across runs and machines with the same FP semantics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::new",
                left: format!("{}x{}", rows, cols),
                right: format!("data of length {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub(crate) fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Dense vector of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(
                "vector entries must be finite".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        Self { data }
    }
}

/// y = W·x. Errors if W.cols != x.len.
pub fn matvec(w: &Matrix, x: &Vector) -> Result<Vector> {
    if w.cols != x.len() {
        return Err(Error::DimensionMismatch {
            op: "matvec",
            left: format!("{}x{}", w.rows, w.cols),
            right: format!("vector of length {}", x.len()),
        });
    }
    let mut out = vec![0.0; w.rows];
    matvec_into(&w.data, w.rows, w.cols, x.data(), &mut out);
    Ok(Vector::from_raw(out))
}

/// out[r] = dot(w_row_r, x). Rows are processed four at a time so that four
/// independent accumulator chains are in flight; each row's sum order is
/// unchanged, so the result is bit-identical to the naive double loop.
pub(crate) fn matvec_into(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    let mut r = 0;
    while r + 4 <= rows {
        let r0 = &w[r * cols..(r + 1) * cols];
        let r1 = &w[(r + 1) * cols..(r + 2) * cols];
        let r2 = &w[(r + 2) * cols..(r + 3) * cols];
        let r3 = &w[(r + 3) * cols..(r + 4) * cols];
        let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..cols {
            let xj = x[j];
            a0 += r0[j] * xj;
            a1 += r1[j] * xj;
            a2 += r2[j] * xj;
            a3 += r3[j] * xj;
        }
        out[r] = a0;
        out[r + 1] = a1;
        out[r + 2] = a2;
        out[r + 3] = a3;
        r += 4;
    }
    while r < rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for j in 0..cols {
            acc += row[j] * x[j];
        }
        out[r] = acc;
        r += 1;
    }
}

/// out[c] += sum_r w[r,c]·u[r]. Written row- then column-wise so the inner
/// loop streams over a contiguous row (an axpy per row).
pub(crate) fn matvec_t_accumulate(
    w: &[f64],
    rows: usize,
    cols: usize,
    u: &[f64],
    out: &mut [f64],
) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(u.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        let ur = u[r];
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * ur;
        }
    }
}

/// acc[r,c] += u[r]·v[c] (outer-product accumulation, row streaming).
pub(crate) fn add_outer(acc: &mut [f64], rows: usize, cols: usize, u: &[f64], v: &[f64]) {
    debug_assert_eq!(acc.len(), rows * cols);
    debug_assert_eq!(u.len(), rows);
    debug_assert_eq!(v.len(), cols);
    for r in 0..rows {
        let ur = u[r];
        let row = &mut acc[r * cols..(r + 1) * cols];
        for (a, &vv) in row.iter_mut().zip(v) {
            *a += ur * vv;
        }
    }
}

/// Numerically stable logistic sigmoid, elementwise. Saturates instead of
/// overflowing: large |z| maps to exactly 0.0 or 1.0.
pub fn sigmoid(z: &Vector) -> Vector {
    Vector::from_raw(z.data().iter().map(|&v| sigmoid_scalar(v)).collect())
}

#[inline]
pub(crate) fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise hyperbolic tangent.
pub fn tanh_act(z: &Vector) -> Vector {
    Vector::from_raw(z.data().iter().map(|&v| v.tanh()).collect())
}

/// Elementwise rectified linear unit. Not used by the default model; kept
/// alongside the other activations.
pub fn relu(z: &Vector) -> Vector {
    Vector::from_raw(z.data().iter().map(|&v| v.max(0.0)).collect())
}

/// Max-shifted softmax: p[i] = exp(z[i]-max) / Σ exp(z[j]-max).
/// All outputs are strictly positive and sum to 1 within 1e-12.
pub fn softmax(z: &Vector) -> Vector {
    let mut out = z.data().to_vec();
    softmax_in_place(&mut out);
    Vector::from_raw(out)
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    debug_assert!(!z.is_empty());
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Elementwise binary op over two equal-length vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
}

pub fn elementwise(a: &Vector, b: &Vector, op: ElementwiseOp) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            op: "elementwise",
            left: format!("length {}", a.len()),
            right: format!("length {}", b.len()),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Mul => x * y,
        })
        .collect();
    Ok(Vector::from_raw(data))
}

/// [a; b] concatenation.
pub fn concat(a: &Vector, b: &Vector) -> Vector {
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Vector::from_raw(data)
}
