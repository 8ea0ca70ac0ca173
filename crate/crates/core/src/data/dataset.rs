use std::path::Path;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[3, S, S]` with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub samples: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn new(size: usize, samples: Vec<Tensor<f32>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        for s in &samples {
            if s.shape() != [3, size, size] {
                return Err(Error::Data(format!("sample shape {:?} is not [3,{size},{size}]", s.shape())));
            }
        }
        Ok(Dataset { size, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the listed samples into `[N, 3, S, S]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let s = self.size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            let t = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range {}", self.len())))?;
            data.extend_from_slice(t.data());
        }
        Tensor::new(&[indices.len(), 3, s, s], data)
    }

    /// `n` samples drawn with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor<f32>> {
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.len())).collect();
        self.batch(&idx)
    }
}

/// Converts an RGB image to `[3, H, W]` in [-1, 1].
pub fn from_rgb(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("consistent shape")
}

/// Inverse of [`from_rgb`], rounding to the nearest 8-bit level. One-channel
/// input is rendered as gray.
pub fn to_rgb(t: &Tensor<f32>) -> Result<image::RgbImage> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 3 || s[0] == 1) {
        return Err(Error::Shape(format!("expected [3,H,W] or [1,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| {
            let v = d[(ch % c) * h * w + y as usize * w + x as usize];
            ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    }))
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    if side == 0 {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let resized = if side as usize == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(from_rgb(&resized))
}

/// Loads a full image without cropping or resizing.
pub fn load_image_raw(path: &Path) -> Result<Tensor<f32>> {
    Ok(from_rgb(&image::open(path)?.to_rgb8()))
}

pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    to_rgb(t)?.save(path)?;
    Ok(())
}

/// Every PNG/JPEG in `dir` (sorted by name), center-cropped and resized to
/// `size`. Unreadable files are skipped with a warning.
pub fn load_folder(dir: &Path, size: usize) -> Result<Dataset> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    let mut samples = Vec::new();
    for p in &paths {
        match load_image(p, size) {
            Ok(t) => samples.push(t),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no readable PNG/JPEG images in {}", dir.display())));
    }
    Dataset::new(size, samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Gaussian blobs placed in mirrored pairs, plus bounded per-pixel
    /// jitter that breaks the symmetry slightly.
    MirroredBlobs,
    /// Oriented sinusoidal stripes.
    Stripes,
    /// Circularly blurred white noise; stationary.
    NoiseTexture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Amplitude of the asymmetric jitter for mirrored blobs.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    0.05
}

impl SynthConfig {
    pub fn new(kind: SynthKind, count: usize, size: usize, seed: u64) -> Self {
        SynthConfig { kind, count, size, seed, jitter: default_jitter() }
    }

    /// Upper bound on MSE(x, mirror(x)) for mirrored-blob samples.
    pub fn mirror_mse_bound(&self) -> f64 {
        4.0 * self.jitter * self.jitter
    }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.size == 0 || cfg.count == 0 {
        return Err(Error::Config("synthetic dataset needs positive count and size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = (0..cfg.count)
        .map(|_| match cfg.kind {
            SynthKind::MirroredBlobs => mirrored_blobs(cfg.size, cfg.jitter, &mut rng),
            SynthKind::Stripes => stripes(cfg.size, &mut rng),
            SynthKind::NoiseTexture => noise_texture(cfg.size, cfg.size, &mut rng),
        })
        .collect();
    Dataset::new(cfg.size, samples)
}

fn mirrored_blobs<R: Rng + ?Sized>(s: usize, jitter: f64, rng: &mut R) -> Tensor<f32> {
    let blobs = rng.gen_range(1..=3);
    let mut field = vec![0.0f64; 3 * s * s];
    let sf = s as f64;
    for _ in 0..blobs {
        let cy = rng.gen_range(0.15..0.85) * sf;
        let cx = rng.gen_range(0.05..0.5) * sf;
        let sigma = rng.gen_range(0.06..0.18) * sf;
        let color: [f64; 3] = [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)];
        for y in 0..s {
            for x in 0..s {
                let (fy, fx) = (y as f64 - cy, x as f64 - cx);
                let fm = (sf - 1.0 - x as f64) - cx;
                let g = (-(fy * fy + fx * fx) / (2.0 * sigma * sigma)).exp()
                    + (-(fy * fy + fm * fm) / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    field[c * s * s + y * s + x] += color[c] * g;
                }
            }
        }
    }
    let data = field
        .iter()
        .map(|&v| {
            let noise = if jitter > 0.0 { jitter * rng.gen_range(-1.0..=1.0) } else { 0.0 };
            (-1.0 + 2.0 * v.min(1.0) + noise).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Tensor::new(&[3, s, s], data).expect("consistent shape")
}

fn stripes<R: Rng + ?Sized>(s: usize, rng: &mut R) -> Tensor<f32> {
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let freq = rng.gen_range(1.5..4.0) / s as f64;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let color: [f64; 3] = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)];
    let mut data = vec![0.0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let u = x as f64 * theta.cos() + y as f64 * theta.sin();
            let v = (std::f64::consts::TAU * freq * u + phase).sin();
            for c in 0..3 {
                data[c * s * s + y * s + x] = (color[c] * v) as f32;
            }
        }
    }
    Tensor::new(&[3, s, s], data).expect("consistent shape")
}

/// `[3, h, w]` white noise, box-blurred with wraparound and scaled to
/// standard deviation 0.4, clamped to [-1, 1].
pub fn noise_texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor<f32> {
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let r = 2usize;
    let taps = ((2 * r + 1) * (2 * r + 1)) as f64;
    let gain = 0.4 * taps.sqrt();
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let white: Vec<f64> = (0..h * w).map(|_| normal.sample(rng)).collect();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..=2 * r {
                    for dx in 0..=2 * r {
                        let yy = (y + h + dy - r) % h;
                        let xx = (x + w + dx - r) % w;
                        acc += white[yy * w + xx];
                    }
                }
                data[c * h * w + y * w + x] = (gain * acc / taps).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("consistent shape")
}

/// Shuffled index order for one pass over `n` samples.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
