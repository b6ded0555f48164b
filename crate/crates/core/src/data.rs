//! Synthetic crowd scenes, instance-mask labels, augmentation and the
//! on-disk dataset layout (`manifest.txt`, `<id>.ppm`, `<id>.txt`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::ImageEncoder;

use crate::error::{arg_err, Error, Result};
use crate::instance::{connected_components, BinaryMap, Connectivity};
use crate::metrics::HeadAnnotation;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive head-count range.
    pub heads: (usize, usize),
    /// Head radius at the top and at the bottom row.
    pub radius: (f64, f64),
    /// Fraction of rows, from the top, that are Gaussian-blurred.
    pub blur_band: f64,
    pub blur_sigma: f64,
    /// Amplitude of the per-pixel background texture.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            height: 64,
            width: 64,
            heads: (5, 20),
            radius: (2.0, 5.0),
            blur_band: 0.3,
            blur_sigma: 1.0,
            noise: 0.08,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "synthetic config";
        if self.height < 8 || self.width < 8 {
            return Err(arg_err(OP, "images must be at least 8x8"));
        }
        if self.heads.0 > self.heads.1 {
            return Err(arg_err(OP, format!("head range {:?} is empty", self.heads)));
        }
        if !(self.radius.0 >= 1.0 && self.radius.1 >= self.radius.0) {
            return Err(arg_err(OP, format!("radius range {:?} must satisfy 1 <= top <= bottom", self.radius)));
        }
        if !(0.0..=1.0).contains(&self.blur_band) || self.blur_sigma < 0.0 {
            return Err(arg_err(OP, "blur band must be in [0, 1] and sigma non-negative"));
        }
        Ok(())
    }
}

/// An RGB image in `[0, 1]`, channel-major, with its head annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// `3 x height x width`.
    pub image: Vec<f32>,
    pub heads: Vec<HeadAnnotation>,
}

impl SceneSample {
    pub fn image_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.image.clone(), &[1, 3, self.height, self.width])
    }
}

/// Minimum center distance between two heads of radii `r1`, `r2`.
/// Disks may overlap by up to ~30% of their radii; the absolute floor
/// keeps each head's center pixel out of contested territory.
pub fn min_separation(r1: f64, r2: f64) -> f64 {
    (0.7 * (r1 + r2)).max(4.5)
}

const PLACEMENT_TRIES: usize = 200;
const SCENE_TRIES: usize = 20;

/// Deterministic scene `index` of the stream defined by `cfg.seed`.
pub fn generate_scene(cfg: &SyntheticConfig, index: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    for _ in 0..SCENE_TRIES {
        let heads = place_heads(cfg, &mut rng)?;
        let sample = SceneSample {
            id: format!("scene_{index:05}"),
            height: cfg.height,
            width: cfg.width,
            image: render_image(cfg, &heads, &mut rng),
            heads,
        };
        let mask = render_instance_mask(&sample);
        let bin = BinaryMap::new(cfg.height, cfg.width, mask.iter().map(|&v| v > 0.5).collect())?;
        if connected_components(&bin, Connectivity::Eight).count == sample.heads.len() {
            return Ok(sample);
        }
    }
    Err(Error::Generation(format!(
        "scene {index}: could not separate heads into independent instances"
    )))
}

fn radius_at(cfg: &SyntheticConfig, y: f64) -> f64 {
    let t = y / (cfg.height - 1) as f64;
    cfg.radius.0 + (cfg.radius.1 - cfg.radius.0) * t
}

fn place_heads(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<HeadAnnotation>> {
    let n = rng.random_range(cfg.heads.0..=cfg.heads.1);
    let mut heads: Vec<HeadAnnotation> = Vec::with_capacity(n);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    for k in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let y = rng.random_range(1.0..h - 2.0);
            let x = rng.random_range(1.0..w - 2.0);
            let r = radius_at(cfg, y) * rng.random_range(0.9..1.1);
            let clear = heads.iter().all(|o| {
                let d = ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt();
                d >= min_separation(o.w / 2.0, r)
            });
            if clear {
                heads.push(HeadAnnotation::new(x, y, 2.0 * r, 2.0 * r));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "placed {k} of {n} heads after {PLACEMENT_TRIES} tries each; config is overcrowded"
            )));
        }
    }
    Ok(heads)
}

fn render_image(cfg: &SyntheticConfig, heads: &[HeadAnnotation], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.55..0.8));
    let tilt = rng.random_range(-0.15f32..0.15);
    let mut img = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let grad = tilt * (y as f32 / h as f32 - 0.5);
        for x in 0..w {
            let tex = rng.random_range(-cfg.noise..=cfg.noise);
            for c in 0..3 {
                img[(c * h + y) * w + x] = base[c] + grad + tex;
            }
        }
    }
    for head in heads {
        let r = head.w / 2.0;
        let tone: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.08..0.3));
        let (y0, y1) = ((head.y - r - 1.0).floor().max(0.0) as usize, ((head.y + r + 1.0).ceil() as usize).min(h - 1));
        let (x0, x1) = ((head.x - r - 1.0).floor().max(0.0) as usize, ((head.x + r + 1.0).ceil() as usize).min(w - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - head.x).powi(2) + (y as f64 - head.y).powi(2)).sqrt();
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
                if alpha == 0.0 {
                    continue;
                }
                // brighter toward the upper-left, like a lit sphere
                let shade = (0.12 * (-(x as f64 - head.x) - (y as f64 - head.y)) / r.max(1.0)) as f32;
                for c in 0..3 {
                    let p = &mut img[(c * h + y) * w + x];
                    *p = (1.0 - alpha) * *p + alpha * (tone[c] + shade);
                }
            }
        }
    }
    if cfg.blur_band > 0.0 && cfg.blur_sigma > 0.0 {
        let rows = (cfg.blur_band * h as f64).round() as usize;
        let blurred = gaussian_blur(&img, 3, h, w, cfg.blur_sigma);
        for c in 0..3 {
            let band = c * h * w..(c * h + rows) * w;
            img[band.clone()].copy_from_slice(&blurred[band]);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &[f32], channels: usize, h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = {
        let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.iter().map(|v| (v / s) as f32).collect()
    };
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; img.len()];
    let mut out = vec![0.0f32; img.len()];
    for c in 0..channels {
        let plane = c * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[plane + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * img[plane + y * w + clamp(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[plane + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[plane + clamp(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    out
}

/// Binary `height x width` label: each pixel inside some head disk goes to
/// the nearest covering head, then pixels touching (8-neighborhood) a
/// different head are cleared so every head is its own component.
pub fn render_instance_mask(sample: &SceneSample) -> Vec<f32> {
    let (h, w) = (sample.height, sample.width);
    let mut owner = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = (f64::INFINITY, 0);
            for (k, head) in sample.heads.iter().enumerate() {
                let d = ((x as f64 - head.x).powi(2) + (y as f64 - head.y).powi(2)).sqrt();
                if d <= head.w / 2.0 && d < best.0 {
                    best = (d, k + 1);
                }
            }
            owner[y * w + x] = best.1;
        }
    }
    let mut mask = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let me = owner[y * w + x];
            if me == 0 {
                continue;
            }
            let contested = Connectivity::Eight.offsets().iter().any(|&(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    return false;
                }
                let other = owner[ny as usize * w + nx as usize];
                other != 0 && other != me
            });
            if !contested {
                mask[y * w + x] = 1.0;
            }
        }
    }
    mask
}

/// Concrete augmentation draw, so it can be replayed or forced in tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    /// Top-left corner of the crop in the scaled image; negative means the
    /// image is placed inside a zero-padded canvas.
    pub offset: (isize, isize),
    pub crop: (usize, usize),
}

impl AugmentParams {
    pub fn identity(sample: &SceneSample) -> Self {
        AugmentParams {
            flip: false,
            scale: 1.0,
            offset: (0, 0),
            crop: (sample.height, sample.width),
        }
    }

    /// Flip with p = 0.5, scale in [0.8, 1.2], random crop of `crop` size.
    pub fn sample(rng: &mut impl Rng, sample: &SceneSample, crop: (usize, usize)) -> Self {
        let flip = rng.random_bool(0.5);
        let scale = rng.random_range(0.8..=1.2);
        let sh = (sample.height as f64 * scale).round() as isize;
        let sw = (sample.width as f64 * scale).round() as isize;
        let pick = |rng: &mut dyn rand::RngCore, full: isize, want: usize| {
            let slack = full - want as isize;
            let o = rng.random_range(0..=slack.unsigned_abs()) as isize;
            if slack >= 0 {
                o
            } else {
                -o
            }
        };
        let oy = pick(rng, sh, crop.0);
        let ox = pick(rng, sw, crop.1);
        AugmentParams { flip, scale, offset: (oy, ox), crop }
    }
}

pub fn augment(sample: &SceneSample, rng: &mut impl Rng, crop: (usize, usize)) -> SceneSample {
    let p = AugmentParams::sample(rng, sample, crop);
    apply_augment(sample, &p)
}

fn bilinear(img: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Flip, then scale, then crop; heads whose centers leave the crop are dropped.
pub fn apply_augment(sample: &SceneSample, p: &AugmentParams) -> SceneSample {
    let (h, w) = (sample.height, sample.width);
    let (ch, cw) = p.crop;
    let mut image = vec![0.0f32; 3 * ch * cw];
    let sh = (h as f64 * p.scale).round() as isize;
    let sw = (w as f64 * p.scale).round() as isize;
    let exact = p.scale == 1.0;
    for c in 0..3 {
        let plane = &sample.image[c * h * w..(c + 1) * h * w];
        for y in 0..ch {
            let sy = y as isize + p.offset.0;
            if sy < 0 || sy >= sh {
                continue;
            }
            for x in 0..cw {
                let sx = x as isize + p.offset.1;
                if sx < 0 || sx >= sw {
                    continue;
                }
                let v = if exact {
                    let src_x = if p.flip { w - 1 - sx as usize } else { sx as usize };
                    plane[sy as usize * w + src_x]
                } else {
                    let fy = sy as f64 / p.scale;
                    let fx = sx as f64 / p.scale;
                    let fx = if p.flip { (w - 1) as f64 - fx } else { fx };
                    bilinear(plane, h, w, fy, fx)
                };
                image[(c * ch + y) * cw + x] = v;
            }
        }
    }
    let heads = sample
        .heads
        .iter()
        .map(|hd| {
            let x = if p.flip { (w - 1) as f64 - hd.x } else { hd.x };
            HeadAnnotation::new(
                x * p.scale - p.offset.1 as f64,
                hd.y * p.scale - p.offset.0 as f64,
                hd.w * p.scale,
                hd.h * p.scale,
            )
        })
        .filter(|hd| hd.x >= 0.0 && hd.y >= 0.0 && hd.x <= (cw - 1) as f64 && hd.y <= (ch - 1) as f64)
        .collect();
    SceneSample {
        id: sample.id.clone(),
        height: ch,
        width: cw,
        image,
        heads,
    }
}

/// One `x y w h` line per head.
pub fn format_annotations(heads: &[HeadAnnotation]) -> String {
    let mut s = String::new();
    for h in heads {
        let _ = writeln!(s, "{:.4} {:.4} {:.4} {:.4}", h.x, h.y, h.w, h.h);
    }
    s
}

pub fn parse_annotations(text: &str, origin: &Path) -> Result<Vec<HeadAnnotation>> {
    let mut heads = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(err(format!("expected `x y w h`, found {} fields", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) || vals[2] <= 0.0 || vals[3] <= 0.0 {
            return Err(err("coordinates must be finite and box sides positive".into()));
        }
        heads.push(HeadAnnotation::new(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(heads)
}

pub fn save_annotations(heads: &[HeadAnnotation], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_annotations(heads))?;
    Ok(())
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<HeadAnnotation>> {
    let path = path.as_ref();
    parse_annotations(&fs::read_to_string(path)?, path)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `3 x h x w` image in `[0, 1]` as binary PPM.
pub fn save_ppm(path: impl AsRef<Path>, image: &[f32], h: usize, w: usize) -> Result<()> {
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let i = y as usize * w + x as usize;
        *px = image::Rgb([to_u8(image[i]), to_u8(image[h * w + i]), to_u8(image[2 * h * w + i])]);
    }
    write_pnm(path.as_ref(), buf.as_raw(), w, h, image::ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary))
}

/// Writes an `h x w` map in `[0, 1]` as binary PGM.
pub fn save_pgm(path: impl AsRef<Path>, map: &[f32], h: usize, w: usize) -> Result<()> {
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(map[y as usize * w + x as usize])]));
    write_pnm(path.as_ref(), buf.as_raw(), w, h, image::ExtendedColorType::L8, PnmSubtype::Graymap(SampleEncoding::Binary))
}

fn write_pnm(path: &Path, raw: &[u8], w: usize, h: usize, color: image::ExtendedColorType, kind: PnmSubtype) -> Result<()> {
    let out = std::io::BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(out).with_subtype(kind).write_image(raw, w as u32, h as u32, color)?;
    Ok(())
}

/// Reads any PNM image as `(3 x h x w in [0, 1], h, w)`.
pub fn load_image(path: impl AsRef<Path>) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::ImageReader::open(path.as_ref())?
        .with_guessed_format()?
        .decode()?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok((out, h, w))
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes `<id>.ppm`, `<id>.txt` per sample and a manifest of ids.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[SceneSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for s in samples {
        save_ppm(dir.join(format!("{}.ppm", s.id)), &s.image, s.height, s.width)?;
        save_annotations(&s.heads, dir.join(format!("{}.txt", s.id)))?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SceneSample>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        msg: e.to_string(),
    })?;
    let mut samples = Vec::new();
    for id in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (image, height, width) = load_image(dir.join(format!("{id}.ppm")))?;
        let heads = load_annotations(dir.join(format!("{id}.txt")))?;
        samples.push(SceneSample {
            id: id.to_string(),
            height,
            width,
            image,
            heads,
        });
    }
    Ok(samples)
}

/// Seed-stable 80/20 split of sample indices into (train, val).
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = n / 5;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Generates `n` scenes of the configured stream.
pub fn generate_dataset(cfg: &SyntheticConfig, n: usize) -> Result<Vec<SceneSample>> {
    (0..n as u64).map(|i| generate_scene(cfg, i)).collect()
}

pub fn sample_path(dir: &Path, id: &str, ext: &str) -> PathBuf {
    dir.join(format!("{id}.{ext}"))
}
