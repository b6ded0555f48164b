//! Dilated convolutional block: tokens are folded back into a feature map,
//! passed through two dilated 3x3 conv + BN + ReLU layers, and unfolded.
//! Spatial size and channel count are preserved.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, shape_err, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Module, Slot};
use crate::swin::TokenGrid;
use crate::tensor::{BatchNormMode, ConvSpec, Tensor};

/// Noise added around the identity center tap at initialization.
pub const INIT_NOISE_STD: f32 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DcbConfig {
    pub rates: (usize, usize),
    /// 1-based stage indices a block follows.
    pub stages: Vec<usize>,
}

impl Default for DcbConfig {
    fn default() -> Self {
        DcbConfig {
            rates: (2, 3),
            stages: vec![3, 4],
        }
    }
}

impl DcbConfig {
    /// No blocks at all: the plain transformer + FPN arm.
    pub fn disabled() -> Self {
        DcbConfig {
            stages: Vec::new(),
            ..Default::default()
        }
    }

    pub fn applies_to(&self, stage: usize) -> bool {
        self.stages.contains(&stage)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.0 == 0 || self.rates.1 == 0 {
            return Err(arg_err("dcb config", "dilation rates must be positive"));
        }
        if let Some(s) = self.stages.iter().find(|s| !(1..=4).contains(*s)) {
            return Err(arg_err("dcb config", format!("stage {s} is not in 1..=4")));
        }
        Ok(())
    }

    /// Receptive-field span of the two-layer block: `1 + 2 r1 + 2 r2`.
    pub fn span(&self) -> usize {
        1 + 2 * self.rates.0 + 2 * self.rates.1
    }
}

/// `[N, H*W, C]` tokens to an `[N, C, H, W]` map.
pub fn tokens_to_map(grid: &TokenGrid) -> Result<Tensor> {
    let (n, h, w, c) = (grid.batch(), grid.height, grid.width, grid.channels);
    grid.tokens.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])
}

/// Inverse of [`tokens_to_map`].
pub fn map_to_tokens(map: &Tensor) -> Result<TokenGrid> {
    map.expect_rank("map_to_tokens", 4)?;
    let s = map.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let tokens = map.permute(&[0, 2, 3, 1])?.reshape(&[n, h * w, c])?;
    TokenGrid::new(tokens, h, w)
}

#[derive(Debug, Clone)]
pub struct DilatedConvBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

fn identity_conv(rng: &mut impl Rng, channels: usize, rate: usize) -> Conv2d {
    let spec = ConvSpec::new(channels, channels, 3).dilation(rate).padding(rate);
    let noise = Normal::new(0.0f32, INIT_NOISE_STD).expect("positive std");
    let mut w: Vec<f32> = (0..channels * channels * 9).map(|_| noise.sample(rng)).collect();
    for c in 0..channels {
        w[(c * channels + c) * 9 + 4] += 1.0;
    }
    Conv2d {
        weight: Tensor::parameter(w, &[channels, channels, 3, 3]).expect("conv weight shape"),
        bias: None,
        spec,
    }
}

impl DilatedConvBlock {
    pub fn new(rng: &mut impl Rng, channels: usize, rates: (usize, usize)) -> Self {
        DilatedConvBlock {
            conv1: identity_conv(rng, channels, rates.0),
            bn1: BatchNorm2d::new(channels),
            conv2: identity_conv(rng, channels, rates.1),
            bn2: BatchNorm2d::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.spec.in_channels
    }

    pub fn forward_map(&self, map: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        map.expect_rank("dcb", 4)?;
        if map.shape()[1] != self.channels() {
            return Err(shape_err(
                "dcb",
                format!("{} channels, block built for {}", map.shape()[1], self.channels()),
            ));
        }
        let x = self.bn1.forward(&self.conv1.forward(map)?, mode)?.relu()?;
        self.bn2.forward(&self.conv2.forward(&x)?, mode)?.relu()
    }

    pub fn forward_grid(&self, grid: &TokenGrid, mode: BatchNormMode) -> Result<TokenGrid> {
        map_to_tokens(&self.forward_map(&tokens_to_map(grid)?, mode)?)
    }
}

impl Module for DilatedConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }
}
