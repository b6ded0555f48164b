use super::Tensor;
use crate::error::{arg_err, shape_err, Result};

pub const NORM_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer. Stored as tensors
/// so checkpoints treat them like any other named buffer.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub momentum: f32,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
            momentum: BN_MOMENTUM,
        }
    }
}

/// Backward of `y = xhat * gamma + beta` w.r.t. `x` for one normalized group.
/// `gxhat` is `g * gamma`; writes into `gx` (strided).
#[inline]
fn normalize_backward(gxhat: &[f32], xhat: &[f32], inv_std: f32, gx: &mut [f32]) {
    let n = gxhat.len() as f32;
    let sum_g: f32 = gxhat.iter().sum();
    let sum_gx: f32 = gxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
    for ((o, &g), &xh) in gx.iter_mut().zip(gxhat).zip(xhat) {
        *o = inv_std / n * (n * g - sum_g - xh * sum_gx);
    }
}

impl Tensor {
    /// `(z - mean) / sqrt(var + eps) * gamma + beta` over the last axis,
    /// population variance.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let c = *self.shape().last().unwrap_or(&0);
        if gamma.numel() != c || beta.numel() != c {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?}, beta {:?} for input {:?}",
                    gamma.shape(),
                    beta.shape(),
                    self.shape()
                ),
            ));
        }
        let rows = self.numel() / c;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            let (gm, bt) = (gamma.data(), beta.data());
            for r in 0..rows {
                let row = &x[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f32>() / c as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[r] = is;
                for k in 0..c {
                    let xh = (row[k] - mean) * is;
                    xhat[r * c + k] = xh;
                    out[r * c + k] = xh * gm[k] + bt[k];
                }
            }
        }
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(
            "layer_norm",
            out,
            self.shape().to_vec(),
            &[self, gamma, beta],
            move |g| {
                if px.requires_grad() {
                    let gm = pg.data();
                    let mut gx = vec![0.0; g.len()];
                    let mut gxhat = vec![0.0; c];
                    for r in 0..rows {
                        for k in 0..c {
                            gxhat[k] = g[r * c + k] * gm[k];
                        }
                        normalize_backward(
                            &gxhat,
                            &xhat[r * c..(r + 1) * c],
                            inv_std[r],
                            &mut gx[r * c..(r + 1) * c],
                        );
                    }
                    drop(gm);
                    px.accumulate_grad(&gx);
                }
                if pg.requires_grad() || pb.requires_grad() {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for r in 0..rows {
                        for k in 0..c {
                            gg[k] += g[r * c + k] * xhat[r * c + k];
                            gb[k] += g[r * c + k];
                        }
                    }
                    pg.accumulate_grad(&gg);
                    pb.accumulate_grad(&gb);
                }
            },
        )
    }

    /// Batch normalization of `[N, C, H, W]` over `(N, H, W)` per channel.
    /// Train mode uses batch statistics and updates `stats` with momentum
    /// (unbiased variance for the running estimate); eval mode reads them.
    pub fn batch_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        stats: &RunningStats,
        mode: BatchNormMode,
    ) -> Result<Tensor> {
        const OP: &str = "batch_norm";
        self.expect_rank(OP, 4)?;
        let s = self.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if n == 0 {
            return Err(arg_err(OP, "empty batch"));
        }
        for (name, t) in [("gamma", gamma), ("beta", beta), ("running mean", &stats.mean), ("running var", &stats.var)] {
            if t.numel() != c {
                return Err(shape_err(OP, format!("{name} {:?} for {c} channels", t.shape())));
            }
        }
        let count = n * plane;
        let idx = move |b: usize, ch: usize, p: usize| (b * c + ch) * plane + p;
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; c];
        {
            let x = self.data();
            let (gm, bt) = (gamma.data(), beta.data());
            let mut rmean = stats.mean.data_mut();
            let mut rvar = stats.var.data_mut();
            for ch in 0..c {
                let (mean, var) = match mode {
                    BatchNormMode::Train => {
                        let mut sum = 0.0f64;
                        for b in 0..n {
                            sum += x[idx(b, ch, 0)..idx(b, ch, plane)].iter().map(|&v| v as f64).sum::<f64>();
                        }
                        let mean = sum / count as f64;
                        let mut sq = 0.0f64;
                        for b in 0..n {
                            sq += x[idx(b, ch, 0)..idx(b, ch, plane)]
                                .iter()
                                .map(|&v| (v as f64 - mean).powi(2))
                                .sum::<f64>();
                        }
                        let var = sq / count as f64;
                        let unbiased = if count > 1 { sq / (count - 1) as f64 } else { var };
                        let m = stats.momentum;
                        rmean[ch] = (1.0 - m) * rmean[ch] + m * mean as f32;
                        rvar[ch] = (1.0 - m) * rvar[ch] + m * unbiased as f32;
                        (mean as f32, var as f32)
                    }
                    BatchNormMode::Eval => (rmean[ch], rvar[ch]),
                };
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[ch] = is;
                for b in 0..n {
                    for p in 0..plane {
                        let i = idx(b, ch, p);
                        let xh = (x[i] - mean) * is;
                        xhat[i] = xh;
                        out[i] = xh * gm[ch] + bt[ch];
                    }
                }
            }
        }
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(OP, out, s.to_vec(), &[self, gamma, beta], move |g| {
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ch in 0..c {
                for b in 0..n {
                    for p in 0..plane {
                        let i = idx(b, ch, p);
                        gg[ch] += g[i] * xhat[i];
                        gb[ch] += g[i];
                    }
                }
            }
            if px.requires_grad() {
                let gm = pg.data();
                let mut gx = vec![0.0; g.len()];
                match mode {
                    BatchNormMode::Eval => {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch];
                            for b in 0..n {
                                for p in 0..plane {
                                    let i = idx(b, ch, p);
                                    gx[i] = g[i] * k;
                                }
                            }
                        }
                    }
                    BatchNormMode::Train => {
                        let mut gxhat = vec![0.0; count];
                        let mut xh = vec![0.0; count];
                        let mut gxc = vec![0.0; count];
                        for ch in 0..c {
                            for b in 0..n {
                                for p in 0..plane {
                                    let i = idx(b, ch, p);
                                    gxhat[b * plane + p] = g[i] * gm[ch];
                                    xh[b * plane + p] = xhat[i];
                                }
                            }
                            normalize_backward(&gxhat, &xh, inv_std[ch], &mut gxc);
                            for b in 0..n {
                                for p in 0..plane {
                                    gx[idx(b, ch, p)] = gxc[b * plane + p];
                                }
                            }
                        }
                    }
                }
                drop(gm);
                px.accumulate_grad(&gx);
            }
            pg.accumulate_grad(&gg);
            pb.accumulate_grad(&gb);
        })
    }
}
