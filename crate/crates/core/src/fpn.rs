//! FPN decoder over the four encoder scales and the segmentation head that
//! turns the stride-4 fused map into a full-resolution score map.

use rand::Rng;

use crate::dcb::tokens_to_map;
use crate::error::{arg_err, shape_err, Result};
use crate::nn::{join, Conv2d, ConvTranspose2d, Module, Slot};
use crate::swin::TokenGrid;
use crate::tensor::{ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FpnConfig {
    pub lateral_dim: usize,
}

impl Default for FpnConfig {
    fn default() -> Self {
        FpnConfig { lateral_dim: 256 }
    }
}

impl FpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lateral_dim < 2 || self.lateral_dim % 2 != 0 {
            return Err(arg_err("fpn config", format!("lateral_dim {} must be even and >= 2", self.lateral_dim)));
        }
        Ok(())
    }
}

/// Nearest-neighbor 2x upsampling of an `[N, C, H, W]` map.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    x.expect_rank("upsample", 4)?;
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut index = Vec::with_capacity(n * c * 4 * h * w);
    for plane in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                index.push((plane * h + y / 2) * w + xx / 2);
            }
        }
    }
    x.gather(index.into(), &[n, c, 2 * h, 2 * w])
}

#[derive(Debug, Clone)]
pub struct Fpn {
    pub laterals: Vec<Conv2d>,
    pub smooth: Conv2d,
}

impl Fpn {
    /// `channels` are the four stage widths, finest first.
    pub fn new(rng: &mut impl Rng, channels: [usize; 4], cfg: FpnConfig) -> Self {
        let l = cfg.lateral_dim;
        Fpn {
            laterals: channels
                .iter()
                .map(|&c| Conv2d::new(rng, ConvSpec::new(c, l, 1), true))
                .collect(),
            smooth: Conv2d::new(rng, ConvSpec::new(l, l, 3).padding(1), true),
        }
    }

    /// Fused `[N, L, H/4, W/4]` map from the four stage grids.
    pub fn forward(&self, grids: &[TokenGrid]) -> Result<Tensor> {
        if grids.len() != 4 {
            return Err(shape_err("fpn", format!("{} feature grids, expected 4", grids.len())));
        }
        for pair in grids.windows(2) {
            let (fine, coarse) = (&pair[0], &pair[1]);
            if fine.height != 2 * coarse.height || fine.width != 2 * coarse.width {
                return Err(shape_err(
                    "fpn",
                    format!(
                        "grids {}x{} and {}x{} are not a 2x ladder",
                        fine.height, fine.width, coarse.height, coarse.width
                    ),
                ));
            }
        }
        let mut top: Option<Tensor> = None;
        for (grid, lateral) in grids.iter().zip(&self.laterals).rev() {
            let lat = lateral.forward(&tokens_to_map(grid)?)?;
            top = Some(match top {
                Some(t) => lat.add(&upsample_nearest2x(&t)?)?,
                None => lat,
            });
        }
        self.smooth.forward(&top.expect("four levels"))
    }
}

impl Module for Fpn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        for (i, l) in self.laterals.iter().enumerate() {
            l.visit(&join(prefix, &format!("lateral.{i}")), f);
        }
        self.smooth.visit(&join(prefix, "smooth"), f);
    }
}

/// 3x3 conv, two 2x deconvolutions (ReLU between them), sigmoid.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub conv: Conv2d,
    pub deconv1: ConvTranspose2d,
    pub deconv2: ConvTranspose2d,
}

impl SegHead {
    pub fn new(rng: &mut impl Rng, lateral_dim: usize) -> Result<Self> {
        let l = lateral_dim;
        Ok(SegHead {
            conv: Conv2d::new(rng, ConvSpec::new(l, l, 3).padding(1), true),
            deconv1: ConvTranspose2d::new(rng, ConvSpec::upsample(l, l / 2, 2)?),
            deconv2: ConvTranspose2d::new(rng, ConvSpec::upsample(l / 2, 1, 2)?),
        })
    }

    /// `[N, 1, 4h, 4w]` logits.
    pub fn logits(&self, fused: &Tensor) -> Result<Tensor> {
        let x = self.conv.forward(fused)?;
        let x = self.deconv1.forward(&x)?.relu()?;
        self.deconv2.forward(&x)
    }

    pub fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        self.logits(fused)?.sigmoid()
    }
}

impl Module for SegHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.deconv1.visit(&join(prefix, "deconv1"), f);
        self.deconv2.visit(&join(prefix, "deconv2"), f);
    }
}
