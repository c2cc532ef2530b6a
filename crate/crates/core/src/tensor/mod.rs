//! Dense 4-D tensors, row-major matrices and the numeric kernels built on them.
//!
//! Every reduction (dot product, GEMM accumulation, norm) runs in a fixed
//! sequential order per output element. Row-level parallelism is used for the
//! larger kernels, which keeps results bitwise reproducible regardless of the
//! number of worker threads.

pub(crate) mod conv;
mod ops;

pub use conv::{
    col2im, conv2d_direct, conv2d_gemm, im2col, kernel_matrix, output_extent, ConvGeometry,
    Im2ColMatrix,
};
pub use ops::{
    cross_entropy_soft, log_sum_exp, operator_norm, relu, relu_grad_mask, softmax,
    softmax_cross_entropy,
};

use crate::error::{invalid, shape_err, Result};

/// Dense `(n, c, h, w)` tensor of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err(format!(
                "tensor shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("tensor element {i} is not finite")));
        }
        Ok(Self { shape, data })
    }

    /// Constructor for internal kernels whose output is finite by construction.
    pub(crate) fn from_parts(shape: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::from_parts(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self::from_parts(shape, vec![value; shape.iter().product()])
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f64 {
        self.data[self.index(idx)]
    }

    /// Elements per sample (`c * h * w`).
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    /// Copies the listed samples, in order, into a new tensor.
    pub fn select_samples(&self, indices: &[usize]) -> Tensor {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let [_, c, h, w] = self.shape;
        Tensor::from_parts([indices.len(), c, h, w], data)
    }

    /// Keeps only the listed channels (in the listed order).
    pub fn select_channels(&self, channels: &[usize]) -> Tensor {
        let [n, _, h, w] = self.shape;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels.len() * plane);
        for i in 0..n {
            for &ch in channels {
                let start = self.index([i, ch, 0, 0]);
                data.extend_from_slice(&self.data[start..start + plane]);
            }
        }
        Tensor::from_parts([n, channels.len(), h, w], data)
    }

    /// Inverse of [`Tensor::select_channels`]: places this tensor's channels at
    /// the listed positions of a zero tensor with `total` channels.
    pub fn scatter_channels(&self, channels: &[usize], total: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        if channels.len() != c {
            return Err(shape_err(format!(
                "scatter of {c} channels given {} positions",
                channels.len()
            )));
        }
        if let Some(&bad) = channels.iter().find(|&&ch| ch >= total) {
            return Err(shape_err(format!("channel {bad} out of range for {total}")));
        }
        let plane = h * w;
        let mut out = Tensor::zeros([n, total, h, w]);
        for i in 0..n {
            for (j, &ch) in channels.iter().enumerate() {
                let src = self.index([i, j, 0, 0]);
                let dst = out.index([i, ch, 0, 0]);
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor::from_parts(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// `a * self + b * other`, elementwise.
    pub fn affine_mix(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Squared Frobenius distance, accumulated in storage order.
    pub fn sq_dist(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "sq_dist")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (&a, &b)| acc + (a - b) * (a - b)))
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v * v)
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Reinterprets the data with a new shape of equal size.
    pub fn reshape(self, shape: [usize; 4]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts(shape, self.data))
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(shape_err(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `y = A^T x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            axpy(xr, self.row(r), &mut y);
        }
        y
    }

    /// `A B`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(gemm::nn(self, other))
    }

    /// `A B^T`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err(format!(
                "matmul_nt {}x{} by ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(gemm::nt(self, other))
    }

    /// `A^T B`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_err(format!(
                "matmul_tn ({}x{})^T by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(gemm::tn(self, other))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) mod gemm {
    //! GEMM variants. Each output element accumulates over the inner index in
    //! ascending order; rows are distributed over threads.

    use rayon::prelude::*;

    use super::{axpy, dot, Matrix};

    const PAR_THRESHOLD: usize = 1 << 16;

    fn run_rows(
        out: &mut [f64],
        row_len: usize,
        work: usize,
        f: impl Fn(usize, &mut [f64]) + Sync,
    ) {
        if row_len == 0 {
            return;
        }
        if work >= PAR_THRESHOLD {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
        } else {
            out.chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
        }
    }

    pub fn nn(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows, b.cols);
        let work = a.rows * a.cols * b.cols;
        run_rows(&mut out.data, b.cols, work, |i, row| {
            for k in 0..a.cols {
                let aik = a.data[i * a.cols + k];
                if aik != 0.0 {
                    axpy(aik, b.row(k), row);
                }
            }
        });
        out
    }

    pub fn nt(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows, b.rows);
        let work = a.rows * a.cols * b.rows;
        run_rows(&mut out.data, b.rows, work, |i, row| {
            let ai = a.row(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = dot(ai, b.row(j));
            }
        });
        out
    }

    pub fn tn(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.cols, b.cols);
        let work = a.rows * a.cols * b.cols;
        run_rows(&mut out.data, b.cols, work, |i, row| {
            for k in 0..a.rows {
                let aki = a.data[k * a.cols + i];
                if aki != 0.0 {
                    axpy(aki, b.row(k), row);
                }
            }
        });
        out
    }
}
