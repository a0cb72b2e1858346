//! Dense f64 tensors and a reverse-mode differentiation graph over them.
//!
//! [`Tensor`] is a plain row-major array with a shape. [`Graph`] records
//! operations on tensors as nodes and replays them backwards to produce
//! gradients. Parameters live outside the graph as tensors; a fresh graph
//! is built for every episode.

mod graph;
mod gradcheck;
pub mod linalg;

pub use graph::{sigmoid as sigmoid_value, softplus as softplus_value, Elementwise, Gradients, Graph, NodeId};
pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(k: usize) -> Self {
        let mut t = Self::zeros(&[k, k]);
        for i in 0..k {
            t.data[i * k + i] = 1.0;
        }
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix view: vectors `[n]` count as `[n, 1]`, scalars as `[1, 1]`.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let c = self.cols();
        self.data[row * c + col] = value;
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors with identical element count.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul_t(self, false, other, false)
    }

    /// Index of the largest entry in each row (first one on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row_slice(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// `op(a) · op(b)` where `op` optionally transposes a matrix.
pub fn matmul_t(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 || a.ndim() > 2 || b.ndim() > 2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: if trans_a { vec![m, k] } else { a.shape.clone() },
            rhs: if trans_b { vec![k2, n] } else { b.shape.clone() },
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, trans_a, b, trans_b, &mut out);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Accumulates `op(a) · op(b)` into `out` (row-major m×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let ac = a.cols() as isize;
    let bc = b.cols() as isize;
    let (rsa, csa) = if trans_a { (1, ac) } else { (ac, 1) };
    let (rsb, csb) = if trans_b { (1, bc) } else { (bc, 1) };
    // SAFETY: strides describe in-bounds views of `a`, `b` and `out`, whose
    // lengths were validated against (m, k, n) by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::from_rows(&[[5.0], [6.0]]);
        let expected = triple_loop(&a, &b);
        assert_eq!(expected.data(), &[17.0, 39.0]);
        assert_eq!(a.matmul(&b).unwrap(), expected);
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let b = Tensor::matrix(3, 2, (0..6).map(|v| (v as f64).sin()).collect()).unwrap();
        let direct = matmul_t(&a, true, &b, false).unwrap();
        let explicit = triple_loop(&a.transpose(), &b);
        for (x, y) in direct.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let c = matmul_t(&b, true, &b, false).unwrap();
        let d = matmul_t(&b.transpose(), false, &b.transpose(), true).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
