use super::linalg::{gemm, Mat};
use super::{check_positive, Tensor};
use crate::error::{arg_err, shape_err, Result};

/// Geometry of a 2-D convolution (cross-correlation, no kernel flip).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, no padding, no dilation.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            in_channels,
            out_channels,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    /// Transposed-conv geometry that upsamples exactly by `factor`
    /// (kernel `2s`, padding `s/2`); `factor` must be even.
    pub fn upsample(in_channels: usize, out_channels: usize, factor: usize) -> Result<Self> {
        if factor == 0 || factor % 2 != 0 {
            return Err(arg_err(
                "conv_transpose2d",
                format!("exact upsampling needs an even stride, got {factor}"),
            ));
        }
        Ok(ConvSpec::new(in_channels, out_channels, 2 * factor)
            .stride(factor)
            .padding(factor / 2))
    }

    /// Extent covered by one kernel application along each axis: `d(k-1)+1`.
    pub fn effective_span(&self) -> (usize, usize) {
        (
            self.dilation.0 * (self.kernel.0 - 1) + 1,
            self.dilation.1 * (self.kernel.1 - 1) + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "conv2d";
        check_positive(OP, "kernel height", self.kernel.0)?;
        check_positive(OP, "kernel width", self.kernel.1)?;
        check_positive(OP, "stride", self.stride.0.min(self.stride.1))?;
        check_positive(OP, "dilation", self.dilation.0.min(self.dilation.1))?;
        check_positive(OP, "in_channels", self.in_channels)?;
        check_positive(OP, "out_channels", self.out_channels)?;
        Ok(())
    }

    /// `floor((H + 2p - d(k-1) - 1)/s) + 1` per axis; errors when below 1.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |n: usize, p: usize, span: usize, s: usize| -> Result<usize> {
            let padded = n + 2 * p;
            if padded < span {
                return Err(arg_err(
                    "conv2d",
                    format!("input {n} (+2*{p} padding) smaller than kernel span {span}"),
                ));
            }
            Ok((padded - span) / s + 1)
        };
        let (span_h, span_w) = self.effective_span();
        Ok((
            axis(h, self.padding.0, span_h, self.stride.0)?,
            axis(w, self.padding.1, span_w, self.stride.1)?,
        ))
    }

    /// `(H-1)s - 2p + d(k-1) + 1` per axis for the transposed direction.
    pub fn transposed_output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if self.kernel.0 < self.stride.0 || self.kernel.1 < self.stride.1 {
            return Err(arg_err(
                "conv_transpose2d",
                format!("kernel {:?} smaller than stride {:?}", self.kernel, self.stride),
            ));
        }
        let axis = |n: usize, p: usize, span: usize, s: usize| -> Result<usize> {
            let full = (n - 1) * s + span;
            if full <= 2 * p {
                return Err(arg_err("conv_transpose2d", format!("padding {p} too large")));
            }
            Ok(full - 2 * p)
        };
        let (span_h, span_w) = self.effective_span();
        Ok((
            axis(h, self.padding.0, span_h, self.stride.0)?,
            axis(w, self.padding.1, span_w, self.stride.1)?,
        ))
    }
}

/// Unfold geometry: image `[c, h, w]` against output grid `[oh, ow]`.
#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geom {
    fn col_rows(&self) -> usize {
        self.c * self.spec.kernel.0 * self.spec.kernel.1
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits `(col_index, image_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let (dh, dw) = self.spec.dilation;
        let ncols = self.col_cols();
        for c in 0..self.c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * sh + ky * dh) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let img_row = (c * self.h + iy as usize) * self.w;
                        let col_row = row * ncols + oy * self.ow;
                        for ox in 0..self.ow {
                            let ix = (ox * sw + kx * dw) as isize - pw as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(col_row + ox, img_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, img: &[f32], cols: &mut [f32]) {
        cols.fill(0.0);
        self.for_each_tap(|ci, ii| cols[ci] = img[ii]);
    }

    fn col2im(&self, cols: &[f32], img: &mut [f32]) {
        self.for_each_tap(|ci, ii| img[ii] += cols[ci]);
    }
}

fn check_input(op: &'static str, x: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    x.expect_rank(op, 4)?;
    let s = x.shape();
    if s[1] != channels {
        return Err(shape_err(
            op,
            format!("input has {} channels, spec expects {channels}", s[1]),
        ));
    }
    Ok((s[0], s[2], s[3]))
}

fn check_weight(op: &'static str, w: &Tensor, expected: [usize; 4]) -> Result<()> {
    if w.shape() != expected {
        return Err(shape_err(
            op,
            format!("weight {:?}, expected {expected:?}", w.shape()),
        ));
    }
    Ok(())
}

fn check_bias(op: &'static str, b: Option<&Tensor>, channels: usize) -> Result<()> {
    match b {
        Some(b) if b.numel() != channels => Err(shape_err(
            op,
            format!("bias {:?} for {channels} output channels", b.shape()),
        )),
        _ => Ok(()),
    }
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad(g: &[f32], channels: usize, plane: usize) -> Vec<f32> {
    let mut gb = vec![0.0; channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        gb[i % channels] += chunk.iter().sum::<f32>();
    }
    gb
}

impl Tensor {
    /// 2-D cross-correlation. `self` is `[N, C, H, W]`, `weight` is
    /// `[C_out, C_in, kh, kw]`, `bias` is `[C_out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
        const OP: &str = "conv2d";
        spec.validate()?;
        let (n, h, w) = check_input(OP, self, spec.in_channels)?;
        let (kh, kw) = spec.kernel;
        let cout = spec.out_channels;
        check_weight(OP, weight, [cout, spec.in_channels, kh, kw])?;
        check_bias(OP, bias, cout)?;
        let (oh, ow) = spec.output_size(h, w)?;
        let geom = Geom { c: spec.in_channels, h, w, oh, ow, spec };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_plane = spec.in_channels * h * w;
        let out_plane = cout * ncols;

        let mut out = vec![0.0; n * out_plane];
        let mut cols = vec![0.0; rows * ncols];
        {
            let x = self.data();
            let wt = weight.data();
            for i in 0..n {
                geom.im2col(&x[i * in_plane..(i + 1) * in_plane], &mut cols);
                gemm(
                    Mat::new(&wt, cout, rows),
                    Mat::new(&cols, rows, ncols),
                    0.0,
                    &mut out[i * out_plane..(i + 1) * out_plane],
                );
            }
        }
        if let Some(b) = bias {
            add_channel_bias(&mut out, &b.data(), ncols);
        }

        let (px, pw, pb) = (self.clone(), weight.clone(), bias.cloned());
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Tensor::from_op(OP, out, vec![n, cout, oh, ow], &parents, move |g| {
            let mut cols = vec![0.0; rows * ncols];
            if pw.requires_grad() {
                let x = px.data();
                let mut gw = vec![0.0; cout * rows];
                for i in 0..n {
                    geom.im2col(&x[i * in_plane..(i + 1) * in_plane], &mut cols);
                    gemm(
                        Mat::new(&g[i * out_plane..(i + 1) * out_plane], cout, ncols),
                        Mat::new(&cols, rows, ncols).t(),
                        1.0,
                        &mut gw,
                    );
                }
                pw.accumulate_grad(&gw);
            }
            if px.requires_grad() {
                let wt = pw.data();
                let mut gx = vec![0.0; n * in_plane];
                for i in 0..n {
                    gemm(
                        Mat::new(&wt, cout, rows).t(),
                        Mat::new(&g[i * out_plane..(i + 1) * out_plane], cout, ncols),
                        0.0,
                        &mut cols,
                    );
                    geom.col2im(&cols, &mut gx[i * in_plane..(i + 1) * in_plane]);
                }
                px.accumulate_grad(&gx);
            }
            if let Some(b) = pb.as_ref().filter(|b| b.requires_grad()) {
                b.accumulate_grad(&channel_bias_grad(g, cout, ncols));
            }
        })
    }

    /// Transposed convolution (adjoint of [`Tensor::conv2d`] with the same
    /// geometry). `weight` is `[C_in, C_out, kh, kw]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        spec: ConvSpec,
    ) -> Result<Tensor> {
        const OP: &str = "conv_transpose2d";
        let (n, h, w) = check_input(OP, self, spec.in_channels)?;
        let (kh, kw) = spec.kernel;
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        check_weight(OP, weight, [cin, cout, kh, kw])?;
        check_bias(OP, bias, cout)?;
        let (oh, ow) = spec.transposed_output_size(h, w)?;
        // The forward conv of this geometry maps [cout, oh, ow] -> [cin, h, w].
        let geom = Geom { c: cout, h: oh, w: ow, oh: h, ow: w, spec };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_plane = cin * h * w;
        let out_plane = cout * oh * ow;

        let mut out = vec![0.0; n * out_plane];
        let mut cols = vec![0.0; rows * ncols];
        {
            let x = self.data();
            let wt = weight.data();
            for i in 0..n {
                gemm(
                    Mat::new(&wt, cin, rows).t(),
                    Mat::new(&x[i * in_plane..(i + 1) * in_plane], cin, ncols),
                    0.0,
                    &mut cols,
                );
                geom.col2im(&cols, &mut out[i * out_plane..(i + 1) * out_plane]);
            }
        }
        if let Some(b) = bias {
            add_channel_bias(&mut out, &b.data(), oh * ow);
        }

        let (px, pw, pb) = (self.clone(), weight.clone(), bias.cloned());
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Tensor::from_op(OP, out, vec![n, cout, oh, ow], &parents, move |g| {
            let mut cols = vec![0.0; rows * ncols];
            let mut gx = px.requires_grad().then(|| vec![0.0; n * in_plane]);
            let mut gw = pw.requires_grad().then(|| vec![0.0; cin * rows]);
            let x = px.data();
            let wt = pw.data();
            for i in 0..n {
                geom.im2col(&g[i * out_plane..(i + 1) * out_plane], &mut cols);
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        Mat::new(&wt, cin, rows),
                        Mat::new(&cols, rows, ncols),
                        0.0,
                        &mut gx[i * in_plane..(i + 1) * in_plane],
                    );
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(
                        Mat::new(&x[i * in_plane..(i + 1) * in_plane], cin, ncols),
                        Mat::new(&cols, rows, ncols).t(),
                        1.0,
                        gw,
                    );
                }
            }
            drop((x, wt));
            if let Some(gx) = gx {
                px.accumulate_grad(&gx);
            }
            if let Some(gw) = gw {
                pw.accumulate_grad(&gw);
            }
            if let Some(b) = pb.as_ref().filter(|b| b.requires_grad()) {
                b.accumulate_grad(&channel_bias_grad(g, cout, oh * ow));
            }
        })
    }
}
