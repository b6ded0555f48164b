use std::rc::Rc;

use super::{numel, Tensor};
use crate::error::{arg_err, shape_err, Result};

/// Marks a zero-filled output slot in [`Tensor::gather`].
pub const GATHER_PAD: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
}

// Sigmoid is clamped so the score map stays strictly inside (0, 1) in f32.
const SIGMOID_LO: f32 = 1e-7;
const SIGMOID_HI: f32 = 1.0 - 1e-7;

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (cdf + x * pdf) as f32
}

fn sigmoid(x: f32) -> f32 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_LO, SIGMOID_HI)
}

impl Tensor {
    fn zip_op(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
        grads: impl Fn(&[f32], &[f32], &[f32]) -> (Vec<f32>, Vec<f32>) + 'static,
    ) -> Result<Tensor> {
        self.expect_same_shape(op, other)?;
        let data: Vec<f32> = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(op, data, self.shape().to_vec(), &[self, other], move |g| {
            let (ga, gb) = grads(g, &pa.data(), &pb.data());
            pa.accumulate_grad(&ga);
            pb.accumulate_grad(&gb);
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_op(other, "add", |a, b| a + b, |g, _, _| (g.to_vec(), g.to_vec()))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_op(
            other,
            "sub",
            |a, b| a - b,
            |g, _, _| (g.to_vec(), g.iter().map(|v| -v).collect()),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_op(
            other,
            "mul",
            |a, b| a * b,
            |g, a, b| {
                (
                    g.iter().zip(b).map(|(g, b)| g * b).collect(),
                    g.iter().zip(a).map(|(g, a)| g * a).collect(),
                )
            },
        )
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * c).collect();
        let p = self.clone();
        Tensor::from_op("scale", data, self.shape().to_vec(), &[self], move |g| {
            let gx: Vec<f32> = g.iter().map(|v| v * c).collect();
            p.accumulate_grad(&gx);
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f32 = self.data().iter().sum();
        let p = self.clone();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], Vec::new(), &[self], move |g| {
            p.accumulate_grad(&vec![g[0]; n]);
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f32)
    }

    /// Adds `bias` (length = last dim) to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = *self.shape().last().unwrap_or(&1);
        if bias.numel() != c || self.rank() == 0 {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} vs input {:?}", bias.shape(), self.shape()),
            ));
        }
        let data: Vec<f32> = {
            let (x, b) = (self.data(), bias.data());
            x.chunks(c)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(x, b)| x + b))
                .collect()
        };
        let (px, pb) = (self.clone(), bias.clone());
        Tensor::from_op("add_bias", data, self.shape().to_vec(), &[self, bias], move |g| {
            px.accumulate_grad(g);
            if pb.requires_grad() {
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                pb.accumulate_grad(&gb);
            }
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        let p = self.clone();
        Tensor::from_op("reshape", self.to_vec(), shape.to_vec(), &[self], move |g| {
            p.accumulate_grad(g)
        })
    }

    /// `out[i] = self[index[i]]`, or 0 where `index[i] == GATHER_PAD`.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != index.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(
                "gather",
                format!("{} indices for shape {shape:?}", index.len()),
            ));
        }
        let n = self.numel();
        if let Some(bad) = index.iter().find(|&&i| i != GATHER_PAD && i >= n) {
            return Err(arg_err("gather", format!("index {bad} out of range {n}")));
        }
        let data: Vec<f32> = {
            let x = self.data();
            index
                .iter()
                .map(|&i| if i == GATHER_PAD { 0.0 } else { x[i] })
                .collect()
        };
        let p = self.clone();
        Tensor::from_op("gather", data, shape.to_vec(), &[self], move |g| {
            let mut gx = vec![0.0; n];
            for (&i, &v) in index.iter().zip(g) {
                if i != GATHER_PAD {
                    gx[i] += v;
                }
            }
            p.accumulate_grad(&gx);
        })
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(arg_err("permute", format!("bad axes {axes:?} for rank {rank}")));
        }
        let in_shape = self.shape();
        let mut in_strides = vec![1usize; rank];
        for k in (0..rank.saturating_sub(1)).rev() {
            in_strides[k] = in_strides[k + 1] * in_shape[k + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = self.numel();
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            index.push(offset);
            for k in (0..rank).rev() {
                counter[k] += 1;
                offset += strides[k];
                if counter[k] < out_shape[k] {
                    break;
                }
                offset -= strides[k] * counter[k];
                counter[k] = 0;
            }
        }
        self.gather(index.into(), &out_shape)
    }

    pub fn activation(&self, kind: Activation) -> Result<Tensor> {
        let x = self.data();
        let data: Vec<f32> = match kind {
            Activation::Gelu => x.iter().map(|&v| gelu(v)).collect(),
            Activation::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        };
        drop(x);
        let p = self.clone();
        let saved_out = if kind == Activation::Sigmoid {
            Some(data.clone())
        } else {
            None
        };
        Tensor::from_op("activation", data, self.shape().to_vec(), &[self], move |g| {
            let gx: Vec<f32> = match kind {
                Activation::Gelu => {
                    let x = p.data();
                    g.iter().zip(x.iter()).map(|(g, &x)| g * gelu_grad(x)).collect()
                }
                Activation::Relu => {
                    let x = p.data();
                    g.iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect()
                }
                Activation::Sigmoid => {
                    let s = saved_out.as_ref().expect("sigmoid output saved");
                    g.iter().zip(s).map(|(g, s)| g * s * (1.0 - s)).collect()
                }
            };
            p.accumulate_grad(&gx);
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.activation(Activation::Relu)
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.activation(Activation::Gelu)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.activation(Activation::Sigmoid)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(arg_err(
                "softmax",
                format!("axis {axis} for shape {:?}", self.shape()),
            ));
        }
        let shape = self.shape();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(out[base + k * inner]);
                }
                let mut total = 0.0f32;
                for k in 0..len {
                    let e = (out[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    total += e;
                }
                for k in 0..len {
                    out[base + k * inner] /= total;
                }
            }
        }
        let y = out.clone();
        let p = self.clone();
        Tensor::from_op("softmax", out, shape.to_vec(), &[self], move |g| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f32 = (0..len)
                        .map(|k| g[base + k * inner] * y[base + k * inner])
                        .sum();
                    for k in 0..len {
                        let idx = base + k * inner;
                        gx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            p.accumulate_grad(&gx);
        })
    }

    /// Mean of `(self - target)^2` over all elements.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(target)?;
        d.mul(&d)?.mean()
    }
}
