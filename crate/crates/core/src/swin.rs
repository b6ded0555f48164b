//! Hierarchical windowed-attention encoder.
//!
//! Patch embedding turns a `[N, C, H, W]` image into a `H/4 x W/4` token
//! grid. Each of the four stages runs alternating regular and shifted
//! window-attention blocks; stages 2-4 start with patch merging, which
//! halves the grid and doubles the channels. A dilated convolutional block
//! may follow any stage (see [`crate::dcb`]).

use std::rc::Rc;

use rand::Rng;

use crate::dcb::{DcbConfig, DilatedConvBlock};
use crate::error::{arg_err, shape_err, Result};
use crate::nn::{join, LayerNorm, Linear, Module, Slot};
use crate::tensor::{BatchNormMode, Tensor, GATHER_PAD};

/// Additive logit for blocked attention pairs.
pub const MASK_BLOCKED: f32 = -1e9;

/// Tokens of one stage laid out on a grid, `tokens` is `[N, H*W, C]` in
/// row-major grid order.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tokens: Tensor,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, height: usize, width: usize) -> Result<Self> {
        tokens.expect_rank("token_grid", 3)?;
        let s = tokens.shape();
        if s[1] != height * width {
            return Err(shape_err(
                "token_grid",
                format!("{} tokens for a {height}x{width} grid", s[1]),
            ));
        }
        Ok(TokenGrid {
            height,
            width,
            channels: s[2],
            tokens,
        })
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn token_count(&self) -> usize {
        self.height * self.width
    }

    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        TokenGrid::new(tokens, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub mlp_ratio: usize,
    /// Image size the position embeddings are laid out for.
    pub img_size: (usize, usize),
    pub dcb: DcbConfig,
}

impl EncoderConfig {
    /// Swin-B layout: C = 128, depths 2/2/18/2, window 7.
    pub fn swin_b(img_size: (usize, usize)) -> Self {
        EncoderConfig {
            in_channels: 3,
            patch_size: 4,
            embed_dim: 128,
            depths: [2, 2, 18, 2],
            heads: [4, 8, 16, 32],
            window: 7,
            mlp_ratio: 4,
            img_size,
            dcb: DcbConfig::default(),
        }
    }

    /// Desk-scale layout: C = 32, depths 1/1/2/1, window 4, 64x64 images.
    pub fn toy() -> Self {
        EncoderConfig {
            in_channels: 3,
            patch_size: 4,
            embed_dim: 32,
            depths: [1, 1, 2, 1],
            heads: [1, 2, 4, 8],
            window: 4,
            mlp_ratio: 4,
            img_size: (64, 64),
            dcb: DcbConfig::default(),
        }
    }

    pub fn stage(&self, s: usize) -> StageConfig {
        StageConfig {
            depth: self.depths[s],
            heads: self.heads[s],
            window: self.window,
            channels: self.embed_dim << s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "encoder config";
        if self.patch_size == 0 || self.embed_dim == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return Err(arg_err(OP, "patch size, embed dim, window and mlp ratio must be positive"));
        }
        for s in 0..4 {
            let st = self.stage(s);
            if st.heads == 0 || st.channels % st.heads != 0 {
                return Err(arg_err(
                    OP,
                    format!("stage {} has {} channels, not divisible by {} heads", s + 1, st.channels, st.heads),
                ));
            }
        }
        let (h, w) = self.img_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(arg_err(OP, format!("img_size {h}x{w} must be a positive multiple of 32")));
        }
        self.dcb.validate()
    }
}

/// `[N, H, W, C]` token layout index helper.
fn grid_index(n: usize, y: usize, x: usize, c: usize, h: usize, w: usize, ch: usize) -> usize {
    ((n * h + y) * w + x) * ch + c
}

/// Splits the grid into non-overlapping `M x M` windows, zero-padding the
/// grid up to a multiple of `M`. Returns `[N * nW, M*M, C]` ordered by
/// batch, window row, window column, then row-major inside the window.
pub fn window_partition(grid: &TokenGrid, m: usize) -> Result<Tensor> {
    if m == 0 {
        return Err(arg_err("window_partition", "window size must be positive"));
    }
    let (n, h, w, c) = (grid.batch(), grid.height, grid.width, grid.channels);
    let (nwh, nww) = (h.div_ceil(m), w.div_ceil(m));
    let mut index = Vec::with_capacity(n * nwh * nww * m * m * c);
    for b in 0..n {
        for wy in 0..nwh {
            for wx in 0..nww {
                for iy in 0..m {
                    for ix in 0..m {
                        let (y, x) = (wy * m + iy, wx * m + ix);
                        for k in 0..c {
                            index.push(if y < h && x < w {
                                grid_index(b, y, x, k, h, w, c)
                            } else {
                                GATHER_PAD
                            });
                        }
                    }
                }
            }
        }
    }
    grid.tokens.gather(index.into(), &[n * nwh * nww, m * m, c])
}

/// Inverse of [`window_partition`]; crops any padding.
pub fn window_reverse(windows: &Tensor, m: usize, height: usize, width: usize) -> Result<TokenGrid> {
    const OP: &str = "window_reverse";
    if m == 0 {
        return Err(arg_err(OP, "window size must be positive"));
    }
    windows.expect_rank(OP, 3)?;
    let (nwh, nww) = (height.div_ceil(m), width.div_ceil(m));
    let s = windows.shape();
    let per_image = nwh * nww;
    if s[1] != m * m || s[0] % per_image != 0 {
        return Err(shape_err(
            OP,
            format!("{:?} windows do not tile a {height}x{width} grid with M={m}", s),
        ));
    }
    let (n, c) = (s[0] / per_image, s[2]);
    let mut index = Vec::with_capacity(n * height * width * c);
    for b in 0..n {
        for y in 0..height {
            for x in 0..width {
                let win = (b * nwh + y / m) * nww + x / m;
                let pos = (y % m) * m + x % m;
                for k in 0..c {
                    index.push((win * m * m + pos) * c + k);
                }
            }
        }
    }
    let tokens = windows.gather(index.into(), &[n, height * width, c])?;
    TokenGrid::new(tokens, height, width)
}

/// Cyclic shift: output `(y, x)` reads input `((y + dy) mod H, (x + dx) mod W)`.
/// `shift_grid(g, s, s)` realizes a roll by `-s`, `shift_grid(g, -s, -s)` undoes it.
pub fn shift_grid(grid: &TokenGrid, dy: isize, dx: isize) -> Result<TokenGrid> {
    let (n, h, w, c) = (grid.batch(), grid.height, grid.width, grid.channels);
    let mut index = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h {
            let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize + dx).rem_euclid(w as isize) as usize;
                for k in 0..c {
                    index.push(grid_index(b, sy, sx, k, h, w, c));
                }
            }
        }
    }
    grid.with_tokens(grid.tokens.gather(index.into(), grid.tokens.shape())?)
}

/// Effective `(window, shift)` for a grid: windows never exceed the grid,
/// and a grid that fits in one window is not shifted.
pub fn window_geometry(height: usize, width: usize, window: usize, shifted: bool) -> (usize, usize) {
    let smallest = height.min(width);
    if smallest <= window {
        (smallest, 0)
    } else {
        (window, if shifted { window / 2 } else { 0 })
    }
}

/// Per-window additive mask `[nW, M*M, M*M]` for a grid padded to a multiple
/// of `M` and rolled by `-shift`. Token pairs that came from different
/// regions before the roll are blocked.
pub fn shifted_window_mask(height: usize, width: usize, m: usize, shift: usize) -> Result<Tensor> {
    let (hp, wp) = (height.div_ceil(m) * m, width.div_ceil(m) * m);
    let region = |v: usize, len: usize| -> usize {
        if v < len - m {
            0
        } else if v < len - shift {
            1
        } else {
            2
        }
    };
    let (nwh, nww) = (hp / m, wp / m);
    let n = m * m;
    let mut mask = Vec::with_capacity(nwh * nww * n * n);
    for wy in 0..nwh {
        for wx in 0..nww {
            let labels: Vec<usize> = (0..n)
                .map(|p| {
                    let (y, x) = (wy * m + p / m, wx * m + p % m);
                    region(y, hp) * 3 + region(x, wp)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    mask.push(if labels[i] == labels[j] { 0.0 } else { MASK_BLOCKED });
                }
            }
        }
    }
    Tensor::new(mask, &[nwh * nww, n, n])
}

/// Multi-head self-attention inside each window (no relative position bias).
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

/// Selects `index` along axis 0 of a tensor, keeping the remaining axes.
fn select_first(t: &Tensor, index: usize) -> Result<Tensor> {
    let inner: usize = t.shape()[1..].iter().product();
    let idx: Vec<usize> = (index * inner..(index + 1) * inner).collect();
    t.gather(idx.into(), &t.shape()[1..])
}

impl WindowAttention {
    pub fn new(rng: &mut impl Rng, dim: usize, heads: usize) -> Self {
        WindowAttention {
            qkv: Linear::new(rng, dim, 3 * dim, true),
            proj: Linear::new(rng, dim, dim, true),
            heads,
        }
    }

    pub fn forward(&self, windows: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        self.forward_with_weights(windows, mask).map(|(out, _)| out)
    }

    /// Returns the projected output `[B, n, C]` and the attention weights
    /// `[B * heads, n, n]`. `mask` is `[nW, n, n]` with `B` a multiple of `nW`.
    pub fn forward_with_weights(&self, windows: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        const OP: &str = "window_attention";
        windows.expect_rank(OP, 3)?;
        let (b, n, c) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
        let h = self.heads;
        if h == 0 || c % h != 0 {
            return Err(arg_err(OP, format!("{c} channels not divisible by {h} heads")));
        }
        let d = c / h;
        let qkv = self
            .qkv
            .forward(windows)?
            .reshape(&[b, n, 3, h, d])?
            .permute(&[2, 0, 3, 1, 4])?
            .reshape(&[3, b * h, n, d])?;
        let q = select_first(&qkv, 0)?.scale(1.0 / (d as f32).sqrt())?;
        let k = select_first(&qkv, 1)?;
        let v = select_first(&qkv, 2)?;
        let mut scores = q.bmm(&k, true)?;
        if let Some(mask) = mask {
            let nw = mask.shape()[0];
            if mask.shape() != [nw, n, n] || b % nw != 0 {
                return Err(shape_err(
                    OP,
                    format!("mask {:?} for {b} windows of {n} tokens", mask.shape()),
                ));
            }
            let m = mask.data();
            let mut expanded = Vec::with_capacity(b * h * n * n);
            for win in 0..b {
                let src = &m[(win % nw) * n * n..(win % nw + 1) * n * n];
                for _ in 0..h {
                    expanded.extend_from_slice(src);
                }
            }
            scores = scores.add(&Tensor::new(expanded, &[b * h, n, n])?)?;
        }
        let weights = scores.softmax(2)?;
        let out = weights
            .bmm(&v, false)?
            .reshape(&[b, h, n, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, c])?;
        Ok((self.proj.forward(&out)?, weights))
    }
}

impl Module for WindowAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(rng: &mut impl Rng, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(rng, dim, hidden, true),
            fc2: Linear::new(rng, hidden, dim, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// One transformer block: `z' = MSA(LN(z)) + z`, `z = MLP(LN(z')) + z'`,
/// with attention restricted to (optionally shifted) windows.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub shifted: bool,
}

impl SwinBlock {
    pub fn new(rng: &mut impl Rng, dim: usize, heads: usize, window: usize, shifted: bool, mlp_ratio: usize) -> Self {
        SwinBlock {
            norm1: LayerNorm::new(dim),
            attn: WindowAttention::new(rng, dim, heads),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, dim * mlp_ratio),
            window,
            shifted,
        }
    }

    /// Windowed attention over an already normalized grid: pad, roll by
    /// `-shift`, attend with the region mask, then undo both.
    pub fn attend(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        let (m, shift) = window_geometry(grid.height, grid.width, self.window, self.shifted);
        let (h, w) = (grid.height, grid.width);
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let padded = if (hp, wp) != (h, w) {
            let windows = window_partition(grid, m)?;
            window_reverse(&windows, m, hp, wp)?
        } else {
            grid.clone()
        };
        let rolled = if shift > 0 {
            shift_grid(&padded, shift as isize, shift as isize)?
        } else {
            padded
        };
        let mask = if shift > 0 {
            Some(shifted_window_mask(hp, wp, m, shift)?)
        } else {
            None
        };
        let windows = window_partition(&rolled, m)?;
        let attended = self.attn.forward(&windows, mask.as_ref())?;
        let merged = window_reverse(&attended, m, hp, wp)?;
        let unrolled = if shift > 0 {
            shift_grid(&merged, -(shift as isize), -(shift as isize))?
        } else {
            merged
        };
        if (hp, wp) == (h, w) {
            Ok(unrolled)
        } else {
            crop_grid(&unrolled, h, w)
        }
    }

    pub fn forward(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        let normed = grid.with_tokens(self.norm1.forward(&grid.tokens)?)?;
        let attended = self.attend(&normed)?;
        let z = grid.tokens.add(&attended.tokens)?;
        let z = z.add(&self.mlp.forward(&self.norm2.forward(&z)?)?)?;
        grid.with_tokens(z)
    }
}

/// Top-left `height x width` sub-grid.
pub fn crop_grid(grid: &TokenGrid, height: usize, width: usize) -> Result<TokenGrid> {
    if height > grid.height || width > grid.width {
        return Err(shape_err(
            "crop_grid",
            format!("{height}x{width} from {}x{}", grid.height, grid.width),
        ));
    }
    let (n, c) = (grid.batch(), grid.channels);
    let mut index = Vec::with_capacity(n * height * width * c);
    for b in 0..n {
        for y in 0..height {
            for x in 0..width {
                for k in 0..c {
                    index.push(grid_index(b, y, x, k, grid.height, grid.width, c));
                }
            }
        }
    }
    let tokens = grid.tokens.gather(index.into(), &[n, height * width, c])?;
    TokenGrid::new(tokens, height, width)
}

impl Module for SwinBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
}

/// Gathers each 2x2 token neighborhood into one `4C` token, ordered
/// top-left, top-right, bottom-left, bottom-right. Odd grids are zero-padded.
pub fn gather_neighborhoods(grid: &TokenGrid) -> Result<TokenGrid> {
    let (n, h, w, c) = (grid.batch(), grid.height, grid.width, grid.channels);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut index = Vec::with_capacity(n * oh * ow * 4 * c);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (sy, sx) = (2 * y + dy, 2 * x + dx);
                    for k in 0..c {
                        index.push(if sy < h && sx < w {
                            grid_index(b, sy, sx, k, h, w, c)
                        } else {
                            GATHER_PAD
                        });
                    }
                }
            }
        }
    }
    let tokens = grid.tokens.gather(index.into(), &[n, oh * ow, 4 * c])?;
    TokenGrid::new(tokens, oh, ow)
}

/// 2x downsampling: neighborhood gather, LayerNorm, linear `4C -> 2C`.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(rng: &mut impl Rng, dim: usize) -> Self {
        PatchMerging {
            norm: LayerNorm::new(4 * dim),
            reduction: Linear::new(rng, 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        let gathered = gather_neighborhoods(grid)?;
        let tokens = self.reduction.forward(&self.norm.forward(&gathered.tokens)?)?;
        gathered.with_tokens(tokens)
    }
}

impl Module for PatchMerging {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.reduction.visit(&join(prefix, "reduction"), f);
    }
}

/// Non-overlapping `P x P` patches, flattened channel-major, projected to
/// `C` dims, plus learnable position embeddings. No class token.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: Tensor,
    pub patch: usize,
    pub in_channels: usize,
    pos_grid: (usize, usize),
}

impl PatchEmbed {
    pub fn new(rng: &mut impl Rng, in_channels: usize, patch: usize, dim: usize, img_size: (usize, usize)) -> Self {
        let pos_grid = (img_size.0 / patch, img_size.1 / patch);
        let n = pos_grid.0 * pos_grid.1;
        PatchEmbed {
            proj: Linear::new(rng, in_channels * patch * patch, dim, true),
            pos: Tensor::parameter(crate::nn::trunc_normal(rng, n * dim, 0.02), &[n, dim])
                .expect("pos embedding shape"),
            patch,
            in_channels,
            pos_grid,
        }
    }

    pub fn pos_grid(&self) -> (usize, usize) {
        self.pos_grid
    }

    pub fn forward(&self, image: &Tensor) -> Result<TokenGrid> {
        const OP: &str = "patch_embed";
        image.expect_rank(OP, 4)?;
        let s = image.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let p = self.patch;
        if c != self.in_channels {
            return Err(shape_err(OP, format!("{c} channels, expected {}", self.in_channels)));
        }
        if h % p != 0 || w % p != 0 {
            return Err(shape_err(OP, format!("{h}x{w} not divisible by patch {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        let feat = c * p * p;
        let mut index = Vec::with_capacity(n * gh * gw * feat);
        for b in 0..n {
            for gy in 0..gh {
                for gx in 0..gw {
                    for k in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                index.push(((b * c + k) * h + gy * p + dy) * w + gx * p + dx);
                            }
                        }
                    }
                }
            }
        }
        let patches = image.gather(index.into(), &[n, gh * gw, feat])?;
        let tokens = self.proj.forward(&patches)?;
        let tokens = tokens.add(&self.position_embedding(n, gh, gw)?)?;
        TokenGrid::new(tokens, gh, gw)
    }

    /// Position embeddings broadcast over the batch; nearest-neighbor
    /// resampled when the grid differs from the configured one.
    fn position_embedding(&self, n: usize, gh: usize, gw: usize) -> Result<Tensor> {
        let (ph, pw) = self.pos_grid;
        let dim = self.pos.shape()[1];
        let mut index: Vec<usize> = Vec::with_capacity(n * gh * gw * dim);
        for _ in 0..n {
            for y in 0..gh {
                let sy = y * ph / gh;
                for x in 0..gw {
                    let sx = x * pw / gw;
                    let base = (sy * pw + sx) * dim;
                    index.extend(base..base + dim);
                }
            }
        }
        let index: Rc<[usize]> = index.into();
        self.pos.gather(index, &[n, gh * gw, dim])
    }
}

impl Module for PatchEmbed {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        self.proj.visit(&join(prefix, "proj"), f);
        f(join(prefix, "pos_embed"), &self.pos, Slot::Param);
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub downsample: Option<PatchMerging>,
    pub blocks: Vec<SwinBlock>,
    pub dcb: Option<DilatedConvBlock>,
}

impl Stage {
    pub fn forward(&self, grid: &TokenGrid, mode: BatchNormMode) -> Result<TokenGrid> {
        let mut g = match &self.downsample {
            Some(pm) => pm.forward(grid)?,
            None => grid.clone(),
        };
        for block in &self.blocks {
            g = block.forward(&g)?;
        }
        if let Some(dcb) = &self.dcb {
            g = dcb.forward_grid(&g, mode)?;
        }
        Ok(g)
    }
}

impl Module for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        if let Some(pm) = &self.downsample {
            pm.visit(&join(prefix, "downsample"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(dcb) = &self.dcb {
            dcb.visit(&join(prefix, "dcb"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SwinEncoder {
    pub config: EncoderConfig,
    pub patch_embed: PatchEmbed,
    pub stages: Vec<Stage>,
}

impl SwinEncoder {
    pub fn new(rng: &mut impl Rng, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let patch_embed = PatchEmbed::new(rng, config.in_channels, config.patch_size, config.embed_dim, config.img_size);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let st = config.stage(s);
            let downsample = (s > 0).then(|| PatchMerging::new(rng, st.channels / 2));
            let blocks = (0..st.depth)
                .map(|i| SwinBlock::new(rng, st.channels, st.heads, st.window, i % 2 == 1, config.mlp_ratio))
                .collect();
            let dcb = config
                .dcb
                .applies_to(s + 1)
                .then(|| DilatedConvBlock::new(rng, st.channels, config.dcb.rates));
            stages.push(Stage { downsample, blocks, dcb });
        }
        Ok(SwinEncoder { config, patch_embed, stages })
    }

    /// Four stage outputs at strides 4, 8, 16, 32 with channels C..8C.
    /// Image sides must be multiples of 32.
    pub fn forward(&self, image: &Tensor, mode: BatchNormMode) -> Result<Vec<TokenGrid>> {
        image.expect_rank("encoder", 4)?;
        let (h, w) = (image.shape()[2], image.shape()[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(shape_err("encoder", format!("{h}x{w} is not padded to a multiple of 32")));
        }
        let mut grid = self.patch_embed.forward(image)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            grid = stage.forward(&grid, mode)?;
            outs.push(grid.clone());
        }
        Ok(outs)
    }
}

impl Module for SwinEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stages.{i}")), f);
        }
    }
}
