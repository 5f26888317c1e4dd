//! Dense row-major matrices of f64. Everything in this crate — parameters,
//! activations, tape values — is one of these. Vectors are 1×n or n×1,
//! scalars are 1×1.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: {}x{} needs {} values, got {}", rows, cols, rows * cols, data.len());
        Mat { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    /// Single row vector (1×n).
    pub fn row(data: Vec<f64>) -> Self {
        Mat { rows: 1, cols: data.len(), data }
    }

    /// Single column vector (n×1).
    pub fn col(data: Vec<f64>) -> Self {
        Mat { rows: data.len(), cols: 1, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// self @ other, plain ikj loop.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", format!("{}x{} @ {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        matmul_into(&mut out, self, other);
        Ok(out)
    }
}

/// out += a @ b (shapes assumed checked).
pub(crate) fn matmul_acc(out: &mut Mat, a: &Mat, b: &Mat) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.cols);
    for i in 0..a.rows {
        let a_row = a.row_slice(i);
        let out_row = out.row_slice_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = b.row_slice(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

pub(crate) fn matmul_into(out: &mut Mat, a: &Mat, b: &Mat) {
    out.fill(0.0);
    matmul_acc(out, a, b);
}

/// out += a @ b^T, with b given untransposed (b: n×k, a: m×k, out: m×n).
pub(crate) fn matmul_nt_acc(out: &mut Mat, a: &Mat, b: &Mat) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.rows);
    for i in 0..a.rows {
        let a_row = a.row_slice(i);
        let out_row = out.row_slice_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row_slice(j);
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// out += a^T @ b, with a given untransposed (a: k×m, b: k×n, out: m×n).
pub(crate) fn matmul_tn_acc(out: &mut Mat, a: &Mat, b: &Mat) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.rows, a.cols);
    debug_assert_eq!(out.cols, b.cols);
    for k in 0..a.rows {
        let a_row = a.row_slice(k);
        let b_row = b.row_slice(k);
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = out.row_slice_mut(i);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
}
