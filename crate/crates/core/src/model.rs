//! The assembled network: image in, per-pixel score map out.

use rand::Rng;

use crate::dcb::DcbConfig;
use crate::error::Result;
use crate::fpn::{Fpn, FpnConfig, SegHead};
use crate::nn::{join, Module, Slot};
use crate::swin::{EncoderConfig, SwinEncoder};
use crate::tensor::{BatchNormMode, Tensor, GATHER_PAD};

/// Input sides are zero-padded up to a multiple of this (the coarsest stride).
pub const PAD_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct DcstConfig {
    pub encoder: EncoderConfig,
    pub fpn: FpnConfig,
}

impl DcstConfig {
    /// Swin-B encoder, DCB after stages 3 and 4, 256-wide FPN, 512x1024 crops.
    pub fn full() -> Self {
        DcstConfig {
            encoder: EncoderConfig::swin_b((512, 1024)),
            fpn: FpnConfig::default(),
        }
    }

    /// C = 32, depths 1/1/2/1, M = 4, 32-wide FPN, 64x64 crops.
    pub fn toy() -> Self {
        DcstConfig {
            encoder: EncoderConfig::toy(),
            fpn: FpnConfig { lateral_dim: 32 },
        }
    }

    pub fn with_dcb(mut self, dcb: DcbConfig) -> Self {
        self.encoder.dcb = dcb;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fpn.validate()
    }
}

/// Whether a dotted parameter path belongs to a dilated convolutional block.
pub fn is_dcb_parameter(name: &str) -> bool {
    name.split('.').any(|part| part == "dcb")
}

#[derive(Debug, Clone)]
pub struct Dcst {
    pub config: DcstConfig,
    pub encoder: SwinEncoder,
    pub fpn: Fpn,
    pub head: SegHead,
}

/// Zero-pads the bottom and right of an `[N, C, H, W]` tensor.
pub fn pad_to(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let mut index = Vec::with_capacity(n * c * height * width);
    for plane in 0..n * c {
        for y in 0..height {
            for xx in 0..width {
                index.push(if y < h && xx < w { (plane * h + y) * w + xx } else { GATHER_PAD });
            }
        }
    }
    x.gather(index.into(), &[n, c, height, width])
}

/// Top-left `height x width` crop of an `[N, C, H, W]` tensor.
pub fn crop_to(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let mut index = Vec::with_capacity(n * c * height * width);
    for plane in 0..n * c {
        for y in 0..height {
            for xx in 0..width {
                index.push((plane * h + y) * w + xx);
            }
        }
    }
    x.gather(index.into(), &[n, c, height, width])
}

impl Dcst {
    pub fn new(rng: &mut impl Rng, config: DcstConfig) -> Result<Self> {
        config.validate()?;
        let encoder = SwinEncoder::new(rng, config.encoder.clone())?;
        let c = config.encoder.embed_dim;
        let fpn = Fpn::new(rng, [c, 2 * c, 4 * c, 8 * c], config.fpn);
        let head = SegHead::new(rng, config.fpn.lateral_dim)?;
        Ok(Dcst { config, encoder, fpn, head })
    }

    /// Score logits `[N, 1, H, W]` for an `[N, 3, H, W]` image batch.
    pub fn logits(&self, image: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        image.expect_rank("dcst", 4)?;
        let (h, w) = (image.shape()[2], image.shape()[3]);
        let (hp, wp) = (h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE);
        let padded = pad_to(image, hp, wp)?;
        let grids = self.encoder.forward(&padded, mode)?;
        let fused = self.fpn.forward(&grids)?;
        crop_to(&self.head.logits(&fused)?, h, w)
    }

    /// Score map in (0, 1), same spatial size as the input.
    pub fn forward(&self, image: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        self.logits(image, mode)?.sigmoid()
    }
}

impl Module for Dcst {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.fpn.visit(&join(prefix, "fpn"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}
