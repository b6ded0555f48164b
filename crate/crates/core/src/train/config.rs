//! Flat `key = value` configuration covering model, data and training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticConfig;
use crate::dcb::DcbConfig;
use crate::error::{Error, Result};
use crate::model::DcstConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: DcstConfig,
    /// Base rate for the encoder, FPN and head.
    pub lr: f32,
    /// Base rate for dilated-conv block parameters.
    pub lr_dcb: f32,
    pub warmup_iters: u64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub iters: u64,
    pub seed: u64,
    pub weight_decay: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub augment: bool,
    pub crop: (usize, usize),
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub checkpoint: Option<PathBuf>,
    pub thresholds: Vec<f32>,
    /// Dataset directory; when absent the synthetic generator is used.
    pub data_dir: Option<PathBuf>,
    pub scenes: usize,
    pub synthetic: SyntheticConfig,
}

/// `{0.30, 0.32, ..., 0.50}`.
pub fn default_thresholds() -> Vec<f32> {
    (0..=10).map(|i| (30 + 2 * i) as f32 / 100.0).collect()
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: DcstConfig::toy(),
            lr: 0.6e-5,
            lr_dcb: 0.6e-6,
            warmup_iters: 1500,
            batch_size: 2,
            grad_accum: 1,
            iters: 2000,
            seed: 0,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            augment: true,
            crop: (64, 64),
            log_every: 50,
            checkpoint_every: 0,
            checkpoint: None,
            thresholds: default_thresholds(),
            data_dir: None,
            scenes: 200,
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| cfg_err(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let inner = v.trim().trim_start_matches('[').trim_end_matches(']');
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_one(key, s))
        .collect()
}

fn parse_pair<T: FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)>
where
    T::Err: std::fmt::Display,
{
    match parse_list::<T>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        other => Err(cfg_err(format!("{key}: expected two values, got {}", other.len()))),
    }
}

fn parse_four(key: &str, v: &str) -> Result<[usize; 4]> {
    parse_list::<usize>(key, v)?
        .try_into()
        .map_err(|l: Vec<usize>| cfg_err(format!("{key}: expected four values, got {}", l.len())))
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. `model.preset`
    /// (`toy` or `full`) is applied before every other key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            if entries.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(cfg_err(format!("line {}: duplicate key {}", i + 1, k.trim())));
            }
        }
        let mut cfg = TrainConfig::default();
        if let Some(p) = entries.remove("model.preset") {
            cfg.model = match p.as_str() {
                "toy" => DcstConfig::toy(),
                "full" => DcstConfig::full(),
                other => return Err(cfg_err(format!("model.preset: unknown preset {other:?}"))),
            };
        }
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => cfg_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let enc = &mut self.model.encoder;
        let syn = &mut self.synthetic;
        match key {
            "model.embed_dim" => enc.embed_dim = parse_one(key, v)?,
            "model.depths" => enc.depths = parse_four(key, v)?,
            "model.heads" => enc.heads = parse_four(key, v)?,
            "model.window" => enc.window = parse_one(key, v)?,
            "model.mlp_ratio" => enc.mlp_ratio = parse_one(key, v)?,
            "model.patch_size" => enc.patch_size = parse_one(key, v)?,
            "model.img_size" => enc.img_size = parse_pair(key, v)?,
            "model.lateral_dim" => self.model.fpn.lateral_dim = parse_one(key, v)?,
            "dcb.stages" => enc.dcb.stages = parse_list(key, v)?,
            "dcb.rates" => enc.dcb.rates = parse_pair(key, v)?,
            "train.lr" => self.lr = parse_one(key, v)?,
            "train.lr_dcb" => self.lr_dcb = parse_one(key, v)?,
            "train.warmup_iters" => self.warmup_iters = parse_one(key, v)?,
            "train.batch_size" => self.batch_size = parse_one(key, v)?,
            "train.grad_accum" => self.grad_accum = parse_one(key, v)?,
            "train.iters" => self.iters = parse_one(key, v)?,
            "train.seed" => self.seed = parse_one(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_one(key, v)?,
            "train.betas" => self.betas = parse_pair(key, v)?,
            "train.eps" => self.eps = parse_one(key, v)?,
            "train.augment" => self.augment = parse_one(key, v)?,
            "train.crop" => self.crop = parse_pair(key, v)?,
            "train.log_every" => self.log_every = parse_one(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_one(key, v)?,
            "train.checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "eval.thresholds" => self.thresholds = parse_list(key, v)?,
            "data.dir" => self.data_dir = Some(PathBuf::from(v)),
            "data.scenes" => self.scenes = parse_one(key, v)?,
            "data.size" => {
                let (h, w) = parse_pair(key, v)?;
                syn.height = h;
                syn.width = w;
            }
            "data.heads" => syn.heads = parse_pair(key, v)?,
            "data.radius" => syn.radius = parse_pair(key, v)?,
            "data.blur_band" => syn.blur_band = parse_one(key, v)?,
            "data.blur_sigma" => syn.blur_sigma = parse_one(key, v)?,
            "data.noise" => syn.noise = parse_one(key, v)?,
            "data.seed" => syn.seed = parse_one(key, v)?,
            _ => return Err(cfg_err(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synthetic.validate()?;
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(cfg_err("train.batch_size and train.grad_accum must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr_dcb >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(cfg_err("learning rates and weight decay must be non-negative, eps positive"));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(cfg_err("train.betas must lie in [0, 1)"));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(cfg_err("train.crop must be positive"));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(cfg_err("eval.thresholds must be a nonempty list in (0, 1)"));
        }
        Ok(())
    }

    /// Every key, in a form [`TrainConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let enc = &self.model.encoder;
        let syn = &self.synthetic;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.embed_dim", enc.embed_dim.to_string());
        kv("model.depths", list(&enc.depths));
        kv("model.heads", list(&enc.heads));
        kv("model.window", enc.window.to_string());
        kv("model.mlp_ratio", enc.mlp_ratio.to_string());
        kv("model.patch_size", enc.patch_size.to_string());
        kv("model.img_size", list(&[enc.img_size.0, enc.img_size.1]));
        kv("model.lateral_dim", self.model.fpn.lateral_dim.to_string());
        kv("dcb.stages", list(&enc.dcb.stages));
        kv("dcb.rates", list(&[enc.dcb.rates.0, enc.dcb.rates.1]));
        kv("train.lr", self.lr.to_string());
        kv("train.lr_dcb", self.lr_dcb.to_string());
        kv("train.warmup_iters", self.warmup_iters.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.grad_accum", self.grad_accum.to_string());
        kv("train.iters", self.iters.to_string());
        kv("train.seed", self.seed.to_string());
        kv("train.weight_decay", self.weight_decay.to_string());
        kv("train.betas", list(&[self.betas.0, self.betas.1]));
        kv("train.eps", self.eps.to_string());
        kv("train.augment", self.augment.to_string());
        kv("train.crop", list(&[self.crop.0, self.crop.1]));
        kv("train.log_every", self.log_every.to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        if let Some(p) = &self.checkpoint {
            kv("train.checkpoint", p.display().to_string());
        }
        kv("eval.thresholds", list(&self.thresholds));
        if let Some(p) = &self.data_dir {
            kv("data.dir", p.display().to_string());
        }
        kv("data.scenes", self.scenes.to_string());
        kv("data.size", list(&[syn.height, syn.width]));
        kv("data.heads", list(&[syn.heads.0, syn.heads.1]));
        kv("data.radius", list(&[syn.radius.0, syn.radius.1]));
        kv("data.blur_band", syn.blur_band.to_string());
        kv("data.blur_sigma", syn.blur_sigma.to_string());
        kv("data.noise", syn.noise.to_string());
        kv("data.seed", syn.seed.to_string());
        s
    }

    pub fn with_dcb(mut self, dcb: DcbConfig) -> Self {
        self.model.encoder.dcb = dcb;
        self
    }
}
