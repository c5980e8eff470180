//! Synthetic images whose content and style are known, plus noise
//! corruptions and the on-disk dataset format.
//!
//! Content picks a binary pattern (stripes, checkerboard, centre square, …).
//! Style picks a background level and a colour tint. Content and style are
//! drawn independently per sample.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// Number of distinct content patterns available.
pub const MAX_CONTENT: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContentStyleConfig {
    pub n_content: usize,
    pub n_style: usize,
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub render: RenderRule,
}

/// How a content value becomes a foreground mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderRule {
    /// One of [`MAX_CONTENT`] fixed templates (stripes, checkerboard, square, ...).
    #[default]
    Templates,
    /// Two-pixel stripes whose orientation is `content · π / n_content`.
    Stripes,
}

impl Default for ContentStyleConfig {
    fn default() -> Self {
        Self {
            n_content: 4,
            n_style: 4,
            n_samples: 2000,
            height: 16,
            width: 16,
            channels: 3,
            noise_std: 0.05,
            render: RenderRule::Templates,
        }
    }
}

impl ContentStyleConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(2..=MAX_CONTENT).contains(&self.n_content) {
            bad.push("n_content");
        }
        if self.n_style == 0 || self.n_style > u16::MAX as usize {
            bad.push("n_style");
        }
        if self.height < 8 || self.width < 8 {
            bad.push("height/width");
        }
        if self.channels != 1 && self.channels != 3 {
            bad.push("channels");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            bad.push("noise_std");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid data keys: {}", bad.join(", "))))
        }
    }
}

/// Images with their latent labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: ImageBatch,
    pub content: Vec<u16>,
    pub style: Vec<u16>,
}

impl LabeledDataset {
    pub fn new(images: ImageBatch, content: Vec<u16>, style: Vec<u16>) -> Result<Self> {
        if content.len() != images.n || style.len() != images.n {
            return Err(Error::contract("label arrays must match the image count"));
        }
        Ok(Self {
            images,
            content,
            style,
        })
    }

    pub fn len(&self) -> usize {
        self.images.n
    }

    pub fn is_empty(&self) -> bool {
        self.images.n == 0
    }

    pub fn content_labels(&self) -> Vec<usize> {
        self.content.iter().map(|&c| c as usize).collect()
    }

    pub fn style_labels(&self) -> Vec<usize> {
        self.style.iter().map(|&s| s as usize).collect()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select(idx),
            content: idx.iter().map(|&i| self.content[i]).collect(),
            style: idx.iter().map(|&i| self.style[i]).collect(),
        }
    }
}

fn stripe(content: usize, n_content: usize, y: usize, x: usize) -> bool {
    let angle = std::f64::consts::PI * content as f64 / n_content as f64;
    let t = x as f64 * angle.cos() + y as f64 * angle.sin();
    (t / 2.0).floor().rem_euclid(2.0) == 0.0
}

fn pattern(content: usize, y: usize, x: usize, h: usize, w: usize) -> bool {
    let (cy, cx) = (y as isize * 2 - h as isize + 1, x as isize * 2 - w as isize + 1);
    match content {
        0 => (y / 2).is_multiple_of(2),
        1 => (x / 2).is_multiple_of(2),
        2 => (y / 2 + x / 2).is_multiple_of(2),
        3 => cy.unsigned_abs() < h / 2 && cx.unsigned_abs() < w / 2,
        4 => ((x + y) / 2).is_multiple_of(2),
        5 => y < 2 || x < 2 || y + 2 >= h || x + 2 >= w,
        6 => y < h / 2,
        _ => x < w / 2,
    }
}

/// Background level and per-channel tint of a style value.
fn style_params(style: usize, n_style: usize) -> (f64, [f64; 3]) {
    let t = if n_style > 1 {
        style as f64 / (n_style - 1) as f64
    } else {
        0.0
    };
    let background = 0.05 + 0.4 * t;
    let angle = std::f64::consts::TAU * style as f64 / n_style as f64;
    let tint = [
        0.8 + 0.2 * angle.cos(),
        0.8 + 0.2 * (angle + 2.1).cos(),
        0.8 + 0.2 * (angle + 4.2).cos(),
    ];
    (background, tint)
}

const FOREGROUND: f64 = 0.5;

/// Noise-free rendering of one `(content, style)` image.
pub fn render(cfg: &ContentStyleConfig, content: usize, style: usize) -> Vec<f64> {
    let (bg, tint) = style_params(style, cfg.n_style);
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let on = match cfg.render {
                RenderRule::Templates => pattern(content, y, x, h, w),
                RenderRule::Stripes => stripe(content, cfg.n_content, y, x),
            };
            let base = bg + if on { FOREGROUND } else { 0.0 };
            for ch in 0..c {
                let v = if c == 3 { base * tint[ch] } else { base };
                out.push(v);
            }
        }
    }
    out
}

fn to_f32_grid(v: f64) -> f64 {
    v.clamp(0.0, 1.0) as f32 as f64
}

/// Draws `n_samples` images with independent uniform content and style.
pub fn generate_content_style(cfg: &ContentStyleConfig, seed: u64) -> Result<LabeledDataset> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let samples: Vec<(u16, u16, Vec<f64>)> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(&[seed, 0xDA7A, i as u64]);
            let content = rng.random_range(0..cfg.n_content);
            let style = rng.random_range(0..cfg.n_style);
            let mut img = render(cfg, content, style);
            for v in &mut img {
                let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *v = to_f32_grid(*v + n);
            }
            (content as u16, style as u16, img)
        })
        .collect();
    let mut pixels = Vec::with_capacity(cfg.n_samples * cfg.height * cfg.width * cfg.channels);
    let mut content = Vec::with_capacity(cfg.n_samples);
    let mut style = Vec::with_capacity(cfg.n_samples);
    for (c, s, img) in samples {
        content.push(c);
        style.push(s);
        pixels.extend(img);
    }
    let images = ImageBatch::new(cfg.n_samples, cfg.height, cfg.width, cfg.channels, pixels)?;
    LabeledDataset::new(images, content, style)
}

// ---------------------------------------------------------------------------
// Corruptions

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown corruption {s:?}")))
    }
}

/// Per-severity parameters: Gaussian standard deviation, shot-noise photon
/// scale (smaller is noisier) and impulse replacement fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionGrid {
    pub gaussian_std: [f64; 5],
    pub shot_scale: [f64; 5],
    pub impulse_amount: [f64; 5],
}

impl Default for CorruptionGrid {
    fn default() -> Self {
        Self {
            gaussian_std: [0.08, 0.12, 0.18, 0.26, 0.38],
            shot_scale: [60.0, 25.0, 12.0, 5.0, 3.0],
            impulse_amount: [0.03, 0.06, 0.09, 0.17, 0.27],
        }
    }
}

/// Applies `kind` at `severity` (1..=5). Each image uses its own stream, so
/// the result does not depend on batch partitioning.
pub fn corrupt(
    batch: &ImageBatch,
    kind: CorruptionKind,
    severity: usize,
    seed: u64,
    grid: &CorruptionGrid,
) -> Result<ImageBatch> {
    if !(1..=5).contains(&severity) {
        return Err(Error::contract(format!("severity {severity} outside 1..=5")));
    }
    let s = severity - 1;
    let kind_id = kind as u64;
    let images: Vec<Vec<f64>> = (0..batch.n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut rng = stream(&[seed, 0xC0, kind_id, severity as u64, i as u64]);
            let img = batch.image(i);
            Ok(match kind {
                CorruptionKind::GaussianNoise => {
                    let n = Normal::new(0.0, grid.gaussian_std[s])
                        .map_err(|e| Error::config(e.to_string()))?;
                    img.iter().map(|&v| (v + n.sample(&mut rng)).clamp(0.0, 1.0)).collect()
                }
                CorruptionKind::ShotNoise => {
                    let scale = grid.shot_scale[s];
                    img.iter()
                        .map(|&v| poisson(&mut rng, v.clamp(0.0, 1.0) * scale).map(|k| (k / scale).clamp(0.0, 1.0)))
                        .collect::<Result<_>>()?
                }
                CorruptionKind::ImpulseNoise => {
                    let amount = grid.impulse_amount[s];
                    img.iter()
                        .map(|&v| {
                            if rng.random_bool(amount) {
                                if rng.random_bool(0.5) {
                                    1.0
                                } else {
                                    0.0
                                }
                            } else {
                                v.clamp(0.0, 1.0)
                            }
                        })
                        .collect()
                }
            })
        })
        .collect::<Result<_>>()?;
    ImageBatch::new(batch.n, batch.h, batch.w, batch.c, images.concat())
}

fn poisson(rng: &mut Rng, lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    let d = Poisson::new(lambda).map_err(|e| Error::config(e.to_string()))?;
    Ok(d.sample(rng))
}

// ---------------------------------------------------------------------------
// File format

const MAGIC: &[u8; 4] = b"RLDS";
const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 16;

/// Little-endian layout: magic, version, `n h w c` as u32, content and
/// style labels as u16, then pixels as f32.
pub fn encode_dataset(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let im = &ds.images;
    let mut out = Vec::with_capacity(HEADER + 4 * im.n + 4 * im.pixels.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [im.n, im.h, im.w, im.c] {
        let d = u32::try_from(d).map_err(|_| Error::contract("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for l in ds.content.iter().chain(&ds.style) {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for &p in &im.pixels {
        let f = p as f32;
        if f as f64 != p {
            return Err(Error::contract("pixel not representable as f32"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.len() < HEADER {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"RLDS\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let labels_end = n
        .checked_mul(4)
        .and_then(|l| l.checked_add(HEADER))
        .ok_or_else(|| Error::format(6, "dimensions overflow"))?;
    let total = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(labels_end))
        .ok_or_else(|| Error::format(6, "dimensions overflow"))?;
    if bytes.len() < total {
        return Err(Error::format(bytes.len() as u64, format!("truncated: expected {total} bytes")));
    }
    if bytes.len() > total {
        return Err(Error::format(total as u64, "trailing bytes"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let content = (0..n).map(|i| u16_at(HEADER + 2 * i)).collect();
    let style = (0..n).map(|i| u16_at(HEADER + 2 * n + 2 * i)).collect();
    let mut pixels = Vec::with_capacity(n * h * w * c);
    for (k, chunk) in bytes[labels_end..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        if !v.is_finite() {
            return Err(Error::format((labels_end + 4 * k) as u64, "non-finite pixel"));
        }
        pixels.push(v);
    }
    let images = ImageBatch::new(n, h, w, c, pixels).map_err(|e| Error::format(6, e.to_string()))?;
    LabeledDataset::new(images, content, style)
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn serialize_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn deserialize_dataset(path: &Path) -> Result<LabeledDataset> {
    decode_dataset(&fs::read(path)?)
}
