//! Training loop: pixel-wise MSE against the instance mask, AdamW with a
//! linear warmup and two parameter groups, resumable checkpoints.

pub mod config;
pub mod eval;
pub mod optim;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{default_thresholds, TrainConfig};
pub use eval::{evaluate, evaluate_scores, predict_scores, threshold_sweep, threshold_sweep_scores, SweepResult, SweepRow};
pub use optim::{lr_at, AdamW};

use crate::data::{augment, generate_dataset, load_dataset, render_instance_mask, split_indices, SceneSample};
use crate::error::{shape_err, Error, Result};
use crate::model::{is_dcb_parameter, Dcst};
use crate::nn::{named_tensors, Slot};
use crate::tensor::{read_tensor_from, write_tensor_to, BatchNormMode, Tensor};

/// Mean over pixels of `(score - label)^2`.
pub fn mse_loss(score: &Tensor, label: &Tensor) -> Result<Tensor> {
    score.mse(label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Main,
    Dcb,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Dcst,
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
    opt: AdamW,
    /// Completed iterations.
    pub iter: u64,
    /// Loss of every completed iteration.
    pub losses: Vec<f32>,
}

/// Batch of images `[B, 3, H, W]` and instance-mask labels `[B, 1, H, W]`.
pub fn stack_batch(samples: &[SceneSample]) -> Result<(Tensor, Tensor)> {
    let (h, w) = (samples[0].height, samples[0].width);
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(shape_err(
                "batch",
                format!("{} is {}x{}, batch is {h}x{w}", s.id, s.height, s.width),
            ));
        }
        images.extend_from_slice(&s.image);
        masks.extend(render_instance_mask(s));
    }
    let n = samples.len();
    Ok((Tensor::new(images, &[n, 3, h, w])?, Tensor::new(masks, &[n, 1, h, w])?))
}

const CKPT_MAGIC: &[u8; 8] = b"DCSTCKPT";
const CKPT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_string(r: &mut impl Read, path: &Path) -> Result<String> {
    let n = u32::from_le_bytes(read_bytes(r)?) as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Dcst::new(&mut rng, config.model.clone())?;
        let params = named_tensors(&model, Slot::Param);
        let buffers = named_tensors(&model, Slot::Buffer);
        let handles: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let opt = AdamW::new(&handles, config.betas, config.eps, config.weight_decay);
        Ok(Trainer {
            config,
            model,
            params,
            buffers,
            opt,
            iter: 0,
            losses: Vec::new(),
        })
    }

    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn group(name: &str) -> ParamGroup {
        if is_dcb_parameter(name) {
            ParamGroup::Dcb
        } else {
            ParamGroup::Main
        }
    }

    /// Learning rate of every parameter for update number `iter + 1`.
    pub fn learning_rates(&self, iter: u64) -> Vec<f32> {
        let c = &self.config;
        self.params
            .iter()
            .map(|(name, _)| {
                let base = match Self::group(name) {
                    ParamGroup::Main => c.lr,
                    ParamGroup::Dcb => c.lr_dcb,
                };
                lr_at(iter + 1, base, c.warmup_iters)
            })
            .collect()
    }

    /// Mini-batch for iteration `iter`, a pure function of the seed and
    /// the iteration so runs resume exactly.
    pub fn batch_for(&self, train: &[SceneSample], iter: u64) -> Vec<SceneSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(iter);
        (0..self.config.batch_size)
            .map(|_| {
                let s = &train[rng.random_range(0..train.len())];
                if self.config.augment {
                    augment(s, &mut rng, self.config.crop)
                } else {
                    s.clone()
                }
            })
            .collect()
    }

    /// One optimizer update (over `grad_accum` micro-batches); returns the loss.
    pub fn step(&mut self, train: &[SceneSample]) -> Result<f32> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let accum = self.config.grad_accum;
        let mut total = 0.0f32;
        for k in 0..accum {
            let batch = self.batch_for(train, self.iter * accum as u64 + k as u64);
            let (images, labels) = stack_batch(&batch)?;
            let score = self.model.forward(&images, BatchNormMode::Train)?;
            let loss = mse_loss(&score, &labels)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            total += value / accum as f32;
            loss.scale(1.0 / accum as f32)?.backward()?;
        }
        let handles: Vec<Tensor> = self.params.iter().map(|(_, t)| t.clone()).collect();
        let lrs = self.learning_rates(self.iter);
        self.opt.step(&handles, &lrs);
        for p in &handles {
            p.zero_grad();
        }
        self.iter += 1;
        self.losses.push(total);
        Ok(total)
    }

    /// Trains until `config.iters`, calling `log` after each iteration and
    /// checkpointing every `checkpoint_every` iterations when a path is set.
    pub fn run(&mut self, train: &[SceneSample], mut log: impl FnMut(u64, f32)) -> Result<()> {
        while self.iter < self.config.iters {
            let loss = self.step(train)?;
            log(self.iter, loss);
            if let (Some(path), every) = (&self.config.checkpoint, self.config.checkpoint_every) {
                if every > 0 && self.iter % every == 0 {
                    self.save(path)?;
                }
            }
        }
        if let Some(path) = &self.config.checkpoint {
            self.save(path)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        write_u32(&mut w, CKPT_VERSION)?;
        write_u64(&mut w, self.iter)?;
        write_u64(&mut w, self.opt.step)?;
        let text = self.config.to_text();
        write_u32(&mut w, text.len() as u32)?;
        w.write_all(text.as_bytes())?;
        write_u32(&mut w, self.losses.len() as u32)?;
        for l in &self.losses {
            w.write_all(&l.to_le_bytes())?;
        }
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in &self.params {
            entries.push((format!("param:{name}"), t.clone()));
        }
        for (name, t) in &self.buffers {
            entries.push((format!("buffer:{name}"), t.clone()));
        }
        for (k, (name, t)) in self.params.iter().enumerate() {
            entries.push((format!("adam.m:{name}"), Tensor::new(self.opt.m[k].clone(), t.shape())?));
            entries.push((format!("adam.v:{name}"), Tensor::new(self.opt.v[k].clone(), t.shape())?));
        }
        write_u32(&mut w, entries.len() as u32)?;
        for (name, t) in &entries {
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_tensor_to(&mut w, t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ferr = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = BufReader::new(File::open(path)?);
        if &read_bytes::<8>(&mut r)? != CKPT_MAGIC {
            return Err(ferr("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_bytes(&mut r)?);
        if version != CKPT_VERSION {
            return Err(ferr(format!("unsupported checkpoint version {version}")));
        }
        let iter = u64::from_le_bytes(read_bytes(&mut r)?);
        let adam_step = u64::from_le_bytes(read_bytes(&mut r)?);
        let config = TrainConfig::parse(&read_string(&mut r, path)?)?;
        let n_losses = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
        let losses = (0..n_losses)
            .map(|_| Ok(f32::from_le_bytes(read_bytes(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        let n = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
        let mut table = std::collections::HashMap::with_capacity(n);
        for _ in 0..n {
            let name = read_string(&mut r, path)?;
            let t = read_tensor_from(&mut r, path)?;
            table.insert(name, t);
        }
        let mut trainer = Trainer::new(config)?;
        let mut take = |key: String, dst: &[f32], shape: &[usize]| -> Result<Vec<f32>> {
            let t = table.remove(&key).ok_or_else(|| ferr(format!("missing entry {key}")))?;
            if t.shape() != shape || dst.len() != t.numel() {
                return Err(ferr(format!("{key}: shape {:?}, model expects {:?}", t.shape(), shape)));
            }
            Ok(t.to_vec())
        };
        for (name, t) in trainer.params.iter().chain(&trainer.buffers) {
            let prefix = if trainer.buffers.iter().any(|(b, _)| b == name) { "buffer" } else { "param" };
            let v = take(format!("{prefix}:{name}"), &t.data(), t.shape())?;
            t.data_mut().copy_from_slice(&v);
        }
        for (k, (name, t)) in trainer.params.iter().enumerate() {
            trainer.opt.m[k] = take(format!("adam.m:{name}"), &trainer.opt.m[k], t.shape())?;
            trainer.opt.v[k] = take(format!("adam.v:{name}"), &trainer.opt.v[k], t.shape())?;
        }
        if let Some(extra) = table.keys().next() {
            return Err(ferr(format!("unexpected entry {extra}")));
        }
        trainer.opt.step = adam_step;
        trainer.iter = iter;
        trainer.losses = losses;
        Ok(trainer)
    }
}

/// Train and validation scenes for `config`: the dataset directory when one
/// is set, the synthetic stream otherwise, split 80/20 by the data seed.
pub fn prepare_data(config: &TrainConfig) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let all = match &config.data_dir {
        Some(dir) => load_dataset(dir)?,
        None => generate_dataset(&config.synthetic, config.scenes)?,
    };
    if all.len() < 2 {
        return Err(Error::Config(format!("need at least 2 scenes, found {}", all.len())));
    }
    let (train, val) = split_indices(all.len(), config.synthetic.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
    Ok((pick(&train), pick(&val)))
}

/// Means of consecutive `window`-sized chunks (a trailing partial chunk is dropped).
pub fn window_means(losses: &[f32], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / window as f64)
        .collect()
}
