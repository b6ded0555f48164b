//! Parameterized layers and the named-parameter table used by checkpoints
//! and the optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{BatchNormMode, ConvSpec, RunningStats, Tensor};

/// Whether a named tensor is trained or only carried along (running stats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Param,
    Buffer,
}

pub trait Module {
    /// Calls `f` with the dotted path of every parameter and buffer.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_tensors(m: &dyn Module, slot: Slot) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t, s| {
        if s == slot {
            out.push((name, t.clone()));
        }
    });
    out
}

pub fn named_parameters(m: &dyn Module) -> Vec<(String, Tensor)> {
    named_tensors(m, Slot::Param)
}

pub fn parameter_count(m: &dyn Module) -> usize {
    named_parameters(m).iter().map(|(_, t)| t.numel()).sum()
}

/// Normal samples truncated (by resampling) to two standard deviations.
pub fn trunc_normal(rng: &mut impl Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("std must be positive");
    (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual conv default.
fn fan_in_uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn param(data: Vec<f32>, shape: &[usize]) -> Tensor {
    Tensor::parameter(data, shape).expect("layer parameter shape")
}

/// Dense projection over the last axis; weight is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Truncated-normal (std 0.02) weights, zero bias.
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            weight: param(trunc_normal(rng, fan_in * fan_out, 0.02), &[fan_in, fan_out]),
            bias: bias.then(|| param(vec![0.0; fan_out], &[fan_out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight, self.bias.as_ref())
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        f(join(prefix, "weight"), &self.weight, Slot::Param);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, Slot::Param);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: param(vec![1.0; dim], &[dim]),
            beta: param(vec![0.0; dim], &[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        f(join(prefix, "weight"), &self.gamma, Slot::Param);
        f(join(prefix, "bias"), &self.beta, Slot::Param);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(rng: &mut impl Rng, spec: ConvSpec, bias: bool) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = spec.in_channels * kh * kw;
        let n = spec.out_channels * fan_in;
        Conv2d {
            weight: param(
                fan_in_uniform(rng, n, fan_in),
                &[spec.out_channels, spec.in_channels, kh, kw],
            ),
            bias: bias.then(|| {
                param(
                    fan_in_uniform(rng, spec.out_channels, fan_in),
                    &[spec.out_channels],
                )
            }),
            spec,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.spec)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        f(join(prefix, "weight"), &self.weight, Slot::Param);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, Slot::Param);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

impl ConvTranspose2d {
    pub fn new(rng: &mut impl Rng, spec: ConvSpec) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = spec.out_channels * kh * kw;
        let n = spec.in_channels * fan_in;
        ConvTranspose2d {
            weight: param(
                fan_in_uniform(rng, n, fan_in),
                &[spec.in_channels, spec.out_channels, kh, kw],
            ),
            bias: param(
                fan_in_uniform(rng, spec.out_channels, fan_in),
                &[spec.out_channels],
            ),
            spec,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv_transpose2d(&self.weight, Some(&self.bias), self.spec)
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        f(join(prefix, "weight"), &self.weight, Slot::Param);
        f(join(prefix, "bias"), &self.bias, Slot::Param);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: param(vec![1.0; channels], &[channels]),
            beta: param(vec![0.0; channels], &[channels]),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        x.batch_norm(&self.gamma, &self.beta, &self.stats, mode)
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, Slot)) {
        f(join(prefix, "weight"), &self.gamma, Slot::Param);
        f(join(prefix, "bias"), &self.beta, Slot::Param);
        f(join(prefix, "running_mean"), &self.stats.mean, Slot::Buffer);
        f(join(prefix, "running_var"), &self.stats.var, Slot::Buffer);
    }
}
