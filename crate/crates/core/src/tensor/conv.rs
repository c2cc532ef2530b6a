//! Zero-padded 2-D convolution: a direct loop nest and the im2col + GEMM path.

use super::{Matrix, Tensor};
use crate::error::{shape_err, Result};

/// Kernel size, stride and zero padding of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        Self { k, stride, pad }
    }

    /// Output `(h, w)` for an input of spatial size `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            output_extent(h, self.k, self.stride, self.pad)?,
            output_extent(w, self.k, self.stride, self.pad)?,
        ))
    }

    /// Largest number of receptive fields that share a single input pixel.
    ///
    /// The im2col matrix repeats each pixel that many times at most, so
    /// `||im2col(x)||_F <= sqrt(multiplicity) * ||x||_F`.
    pub fn max_patch_multiplicity(&self, h: usize, w: usize) -> Result<usize> {
        let (oh, ow) = self.output_hw(h, w)?;
        let per_axis = |size: usize, out: usize| {
            (0..size)
                .map(|i| {
                    (0..out)
                        .filter(|&o| {
                            let start = (o * self.stride) as isize - self.pad as isize;
                            let i = i as isize;
                            i >= start && i < start + self.k as isize
                        })
                        .count()
                })
                .max()
                .unwrap_or(0)
        };
        Ok(per_axis(h, oh) * per_axis(w, ow))
    }
}

/// `floor((input + 2 pad - k) / stride) + 1`, rejecting empty outputs.
pub fn output_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(shape_err("stride must be positive"));
    }
    if k == 0 {
        return Err(shape_err("kernel size must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(shape_err(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_kernel(input: &Tensor, kernel: &Tensor) -> Result<()> {
    if kernel.c() != input.c() {
        return Err(shape_err(format!(
            "kernel expects {} input channels, input has {}",
            kernel.c(),
            input.c()
        )));
    }
    if kernel.h() != kernel.w() {
        return Err(shape_err(format!(
            "kernel must be square, got {}x{}",
            kernel.h(),
            kernel.w()
        )));
    }
    Ok(())
}

/// Pre-activation convolution by explicit loop nest.
pub fn conv2d_direct(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    check_kernel(input, kernel)?;
    let [n, ci, h, w] = input.shape();
    let [co, _, k, _] = kernel.shape();
    let oh = output_extent(h, k, stride, pad)?;
    let ow = output_extent(w, k, stride, pad)?;
    let x = input.data();
    let wk = kernel.data();
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let wv = wk[((o * ci + c) * k + ky) * k + kx];
                                let xv = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                {
                                    0.0
                                } else {
                                    x[((b * ci + c) * h + iy as usize) * w + ix as usize]
                                };
                                acc += wv * xv;
                            }
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts([n, co, oh, ow], out))
}

/// Unrolled receptive fields of an input batch.
///
/// Row index is `(channel, kernel_row, kernel_col)`, column index is
/// `(sample, out_row, out_col)`, both in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Im2ColMatrix {
    pub matrix: Matrix,
    pub input_shape: [usize; 4],
    pub geometry: ConvGeometry,
    pub out_h: usize,
    pub out_w: usize,
}

impl Im2ColMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn samples(&self) -> usize {
        self.input_shape[0]
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub fn im2col(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Im2ColMatrix> {
    let [n, c, h, w] = input.shape();
    let oh = output_extent(h, k, stride, pad)?;
    let ow = output_extent(w, k, stride, pad)?;
    let rows = c * k * k;
    let cols = n * oh * ow;
    let mut data = vec![0.0; rows * cols];
    let x = input.data();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ch * k + ky) * k + kx;
                let row = &mut data[r * cols..(r + 1) * cols];
                for b in 0..n {
                    let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                row[base + ox] = plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Im2ColMatrix {
        matrix: Matrix { rows, cols, data },
        input_shape: input.shape(),
        geometry: ConvGeometry::new(k, stride, pad),
        out_h: oh,
        out_w: ow,
    })
}

/// Reshapes a `(c_o, c_i, k, k)` kernel into the `(c_o, c_i k k)` operator
/// acting on im2col columns.
pub fn kernel_matrix(kernel: &Tensor) -> Matrix {
    let [co, ci, k, k2] = kernel.shape();
    Matrix {
        rows: co,
        cols: ci * k * k2,
        data: kernel.data().to_vec(),
    }
}

/// Reorders a `(c_o, n * positions)` product into an `(n, c_o, oh, ow)` tensor.
pub(crate) fn matrix_to_feature_map(m: &Matrix, n: usize, oh: usize, ow: usize) -> Tensor {
    let co = m.rows();
    let p = oh * ow;
    let mut out = vec![0.0; n * co * p];
    for o in 0..co {
        let row = m.row(o);
        for b in 0..n {
            out[(b * co + o) * p..(b * co + o + 1) * p].copy_from_slice(&row[b * p..(b + 1) * p]);
        }
    }
    Tensor::from_parts([n, co, oh, ow], out)
}

/// Inverse reordering of [`matrix_to_feature_map`].
pub(crate) fn feature_map_to_matrix(t: &Tensor) -> Matrix {
    let [n, co, oh, ow] = t.shape();
    let p = oh * ow;
    let mut data = vec![0.0; co * n * p];
    let x = t.data();
    for o in 0..co {
        for b in 0..n {
            data[o * n * p + b * p..o * n * p + (b + 1) * p]
                .copy_from_slice(&x[(b * co + o) * p..(b * co + o + 1) * p]);
        }
    }
    Matrix {
        rows: co,
        cols: n * p,
        data,
    }
}

/// Convolution as a single GEMM over precomputed im2col columns.
pub fn conv2d_gemm(cols: &Im2ColMatrix, kernel: &Tensor) -> Result<Tensor> {
    let wm = kernel_matrix(kernel);
    if wm.cols() != cols.rows() {
        return Err(shape_err(format!(
            "kernel unrolls to {} columns but im2col has {} rows",
            wm.cols(),
            cols.rows()
        )));
    }
    if kernel.h() != cols.geometry.k {
        return Err(shape_err(format!(
            "kernel size {} does not match im2col kernel size {}",
            kernel.h(),
            cols.geometry.k
        )));
    }
    let prod = wm.matmul(&cols.matrix)?;
    Ok(matrix_to_feature_map(
        &prod,
        cols.samples(),
        cols.out_h,
        cols.out_w,
    ))
}

/// Scatter-adds unrolled columns back into an input-shaped tensor (adjoint of im2col).
pub fn col2im(cols: &Matrix, input_shape: [usize; 4], geometry: ConvGeometry) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    let ConvGeometry { k, stride, pad } = geometry;
    let oh = output_extent(h, k, stride, pad)?;
    let ow = output_extent(w, k, stride, pad)?;
    if cols.rows() != c * k * k || cols.cols() != n * oh * ow {
        return Err(shape_err(format!(
            "col2im: {}x{} columns do not match input {input_shape:?}",
            cols.rows(),
            cols.cols()
        )));
    }
    let mut out = vec![0.0; n * c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ch * k + ky) * k + kx);
                for b in 0..n {
                    let plane = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_convolution() {
        let x = Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap();
        let k = Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(conv2d_direct(&x, &k, 1, 0).unwrap().data(), &[6.0]);
        let cols = im2col(&x, 1, 1, 0).unwrap();
        assert_eq!(conv2d_gemm(&cols, &k).unwrap().data(), &[6.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::zeros([2, 3, 4, 4]);
        let k = Tensor::from_fn([2, 3, 3, 3], |[a, b, c, d]| (a + b + c + d) as f64 - 3.5);
        let y = conv2d_direct(&x, &k, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_column() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(&x, 2, 1, 0).unwrap();
        assert_eq!((cols.rows(), cols.cols()), (4, 1));
        assert_eq!(cols.matrix.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unit_kernel_patches_are_pixels() {
        let x = Tensor::from_fn([1, 1, 3, 3], |[_, _, y, x]| (y * 3 + x) as f64);
        let cols = im2col(&x, 1, 1, 0).unwrap();
        assert_eq!((cols.rows(), cols.cols()), (1, 9));
        assert_eq!(cols.matrix.data(), x.data());
    }

    #[test]
    fn identity_and_zero_kernels_on_gemm_path() {
        let x = Tensor::from_fn([2, 1, 3, 3], |[n, _, y, x]| {
            (n * 9 + y * 3 + x) as f64 * 0.5 - 2.0
        });
        let cols = im2col(&x, 1, 1, 0).unwrap();
        let one = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d_gemm(&cols, &one).unwrap(), x);
        let zero = Tensor::zeros([1, 1, 1, 1]);
        assert!(conv2d_gemm(&cols, &zero)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let k = Tensor::zeros([1, 3, 3, 3]);
        assert!(matches!(
            conv2d_direct(&x, &k, 1, 1),
            Err(crate::Error::Shape(_))
        ));
        let cols = im2col(&x, 3, 1, 1).unwrap();
        assert!(conv2d_gemm(&cols, &k).is_err());
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::zeros([1, 1, 2, 2]);
        let k = Tensor::zeros([1, 1, 3, 3]);
        assert!(conv2d_direct(&x, &k, 1, 0).is_err());
        assert!(im2col(&x, 3, 1, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = Tensor::from_fn([2, 2, 5, 4], |[a, b, c, d]| {
            ((a * 7 + b * 5 + c * 3 + d) % 11) as f64 - 5.0
        });
        let g = ConvGeometry::new(3, 2, 1);
        let cols = im2col(&x, g.k, g.stride, g.pad).unwrap();
        let c = Matrix::new(
            cols.rows(),
            cols.cols(),
            (0..cols.rows() * cols.cols())
                .map(|i| ((i * 13) % 7) as f64 - 3.0)
                .collect(),
        )
        .unwrap();
        let lhs = super::super::dot(cols.matrix.data(), c.data());
        let back = col2im(&c, x.shape(), g).unwrap();
        let rhs = super::super::dot(x.data(), back.data());
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn patch_multiplicity() {
        assert_eq!(
            ConvGeometry::new(3, 1, 1)
                .max_patch_multiplicity(8, 8)
                .unwrap(),
            9
        );
        assert_eq!(
            ConvGeometry::new(3, 2, 1)
                .max_patch_multiplicity(8, 8)
                .unwrap(),
            4
        );
        assert_eq!(
            ConvGeometry::new(1, 1, 0)
                .max_patch_multiplicity(4, 4)
                .unwrap(),
            1
        );
    }
}
