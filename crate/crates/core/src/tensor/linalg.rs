use super::Tensor;
use crate::error::{shape_err, Result};

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            transposed: !self.transposed,
            ..self
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a · b` with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f32, out: &mut [f32]) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(out.len(), a.rows * b.cols);
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: all three buffers were bounds-checked against their logical
    // dimensions above and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

impl Tensor {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_rank("matmul", 2)?;
        other.expect_rank("matmul", 2)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(&self.data(), m, k),
            Mat::new(&other.data(), k, n),
            0.0,
            &mut out,
        );
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op("matmul", out, vec![m, n], &[self, other], move |g| {
            if pa.requires_grad() {
                let mut ga = vec![0.0; m * k];
                gemm(Mat::new(g, m, n), Mat::new(&pb.data(), k, n).t(), 0.0, &mut ga);
                pa.accumulate_grad(&ga);
            }
            if pb.requires_grad() {
                let mut gb = vec![0.0; k * n];
                gemm(Mat::new(&pa.data(), m, k).t(), Mat::new(g, m, n), 0.0, &mut gb);
                pb.accumulate_grad(&gb);
            }
        })
    }

    /// Batched product of `[b, m, k]` and `[b, k, n]`, optionally using the
    /// transpose of the second operand's trailing two axes (`[b, n, k]`).
    pub fn bmm(&self, other: &Tensor, transpose_other: bool) -> Result<Tensor> {
        self.expect_rank("bmm", 3)?;
        other.expect_rank("bmm", 3)?;
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bs2, r1, r2) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        let (k2, n) = if transpose_other { (r2, r1) } else { (r1, r2) };
        if bs != bs2 || k != k2 {
            return Err(shape_err(
                "bmm",
                format!(
                    "{:?} x {:?} (transpose={transpose_other})",
                    self.shape(),
                    other.shape()
                ),
            ));
        }
        fn other_mat(d: &[f32], r1: usize, r2: usize, transpose: bool) -> Mat<'_> {
            let mat = Mat::new(d, r1, r2);
            if transpose {
                mat.t()
            } else {
                mat
            }
        }
        let mut out = vec![0.0; bs * m * n];
        {
            let (a, b) = (self.data(), other.data());
            for i in 0..bs {
                gemm(
                    Mat::new(&a[i * m * k..(i + 1) * m * k], m, k),
                    other_mat(&b[i * k * n..(i + 1) * k * n], r1, r2, transpose_other),
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op("bmm", out, vec![bs, m, n], &[self, other], move |g| {
            if pa.requires_grad() {
                let b = pb.data();
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm(
                        Mat::new(&g[i * m * n..(i + 1) * m * n], m, n),
                        other_mat(&b[i * k * n..(i + 1) * k * n], r1, r2, transpose_other).t(),
                        0.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                pa.accumulate_grad(&ga);
            }
            if pb.requires_grad() {
                let a = pa.data();
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let a_i = Mat::new(&a[i * m * k..(i + 1) * m * k], m, k);
                    let g_i = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if transpose_other {
                        // d(b^T) = a^T g, so d(b) = g^T a
                        gemm(g_i.t(), a_i, 0.0, dst);
                    } else {
                        gemm(a_i.t(), g_i, 0.0, dst);
                    }
                }
                pb.accumulate_grad(&gb);
            }
        })
    }

    /// `x · W + b` applied over the last axis; `weight` is `[in, out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        weight.expect_rank("linear", 2)?;
        let (fan_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
        let last = *self.shape().last().unwrap_or(&0);
        if last != fan_in {
            return Err(shape_err(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape(), weight.shape()),
            ));
        }
        let rows = self.numel() / fan_in;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = fan_out;
        let y = self.reshape(&[rows, fan_in])?.matmul(weight)?;
        let y = match bias {
            Some(b) => y.add_bias(b)?,
            None => y,
        };
        y.reshape(&out_shape)
    }
}
