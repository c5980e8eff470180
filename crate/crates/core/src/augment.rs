//! Image augmentations: random resized crop, horizontal flip, colour jitter,
//! grayscale, Gaussian blur, solarize and per-channel normalisation, applied
//! in that order.
//!
//! Every random choice for one image is resolved up front into an
//! [`AugmentationDraw`], so an `(image, draw)` pair always replays to the
//! same output.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// `n` images of `h × w × c`, stored image-major then row-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub pixels: Vec<f64>,
}

impl ImageBatch {
    pub fn new(n: usize, h: usize, w: usize, c: usize, pixels: Vec<f64>) -> Result<Self> {
        if c != 1 && c != 3 {
            return Err(Error::contract(format!("{c} channels; expected 1 or 3")));
        }
        if h == 0 || w == 0 || pixels.len() != n * h * w * c {
            return Err(Error::InvalidShape {
                op: "image_batch",
                lhs: vec![n, h, w, c],
                rhs: vec![pixels.len()],
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("image_batch".into()));
        }
        Ok(Self { n, h, w, c, pixels })
    }

    pub fn image_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    /// Copy of the selected images.
    pub fn select(&self, idx: &[usize]) -> Self {
        let pixels = idx.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        Self {
            n: idx.len(),
            pixels,
            ..*self
        }
    }

    /// Flattened `n × (h·w·c)` matrix.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.n, self.image_len()], self.pixels.clone())
    }

    fn check_unit_range(&self, op: &str) -> Result<()> {
        match self.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            Some(p) => Err(Error::contract(format!("{op}: pixel {p} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    fn map_images(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let pixels = (0..self.n).flat_map(|i| f(self.image(i))).collect();
        Self {
            pixels,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub crop_area_range: [f64; 2],
    /// Aspect ratios are sampled log-uniformly in this range.
    pub aspect_range: [f64; 2],
    pub out_size: [usize; 2],
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: [f64; 2],
    pub solarize_prob: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop_area_range: [0.08, 1.0],
            aspect_range: [3.0 / 4.0, 4.0 / 3.0],
            out_size: [16, 16],
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_kernel: 3,
            blur_sigma: [0.1, 2.0],
            solarize_prob: 0.2,
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }
}

impl AugmentationSpec {
    /// Only resize and normalise.
    pub fn disabled(out_size: [usize; 2]) -> Self {
        Self {
            crop_area_range: [1.0, 1.0],
            aspect_range: [1.0, 1.0],
            out_size,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let [a0, a1] = self.crop_area_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            bad.push("crop_area_range");
        }
        let [r0, r1] = self.aspect_range;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            bad.push("aspect_range");
        }
        if self.out_size.contains(&0) {
            bad.push("out_size");
        }
        let probs = [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                bad.push(name);
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                bad.push(name);
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            bad.push("hue");
        }
        if self.blur_kernel.is_multiple_of(2) {
            bad.push("blur_kernel");
        }
        let [s0, s1] = self.blur_sigma;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            bad.push("blur_sigma");
        }
        if self.mean.is_empty() || self.std.len() != self.mean.len() || self.std.iter().any(|s| !(*s > 0.0))
        {
            bad.push("mean/std");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid augmentation keys: {}", bad.join(", "))))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterDraw {
    pub order: [JitterOp; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// Every random choice of one pipeline application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationDraw {
    pub crop: CropRect,
    pub flip: bool,
    pub jitter: Option<JitterDraw>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub solarize: bool,
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Random crop rectangle: up to ten tries at a sampled area fraction and
/// log-uniform aspect ratio, then a centred crop clamped to the aspect range.
pub fn sample_crop(spec: &AugmentationSpec, h: usize, w: usize, rng: &mut Rng) -> CropRect {
    let area = (h * w) as f64;
    let (lr0, lr1) = (spec.aspect_range[0].ln(), spec.aspect_range[1].ln());
    for _ in 0..10 {
        let target = area * uniform(rng, spec.crop_area_range[0], spec.crop_area_range[1]);
        let aspect = uniform(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropRect {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let ratio = w as f64 / h as f64;
    let (ch, cw) = if ratio < spec.aspect_range[0] {
        ((w as f64 / spec.aspect_range[0]).round() as usize, w)
    } else if ratio > spec.aspect_range[1] {
        (h, (h as f64 * spec.aspect_range[1]).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    CropRect {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Draws the random choices for one image of `h × w`.
pub fn sample_draw(spec: &AugmentationSpec, h: usize, w: usize, rng: &mut Rng) -> AugmentationDraw {
    let crop = sample_crop(spec, h, w, rng);
    let flip = rng.random_bool(spec.flip_prob);
    let jitter = rng.random_bool(spec.jitter_prob).then(|| {
        let mut order = [
            JitterOp::Brightness,
            JitterOp::Contrast,
            JitterOp::Saturation,
            JitterOp::Hue,
        ];
        order.shuffle(rng);
        let factor = |rng: &mut Rng, s: f64| uniform(rng, (1.0 - s).max(0.0), 1.0 + s);
        JitterDraw {
            order,
            brightness: factor(rng, spec.brightness),
            contrast: factor(rng, spec.contrast),
            saturation: factor(rng, spec.saturation),
            hue: uniform(rng, -spec.hue, spec.hue),
        }
    });
    let grayscale = rng.random_bool(spec.grayscale_prob);
    let blur_sigma = rng
        .random_bool(spec.blur_prob)
        .then(|| uniform(rng, spec.blur_sigma[0], spec.blur_sigma[1]));
    let solarize = rng.random_bool(spec.solarize_prob);
    AugmentationDraw {
        crop,
        flip,
        jitter,
        grayscale,
        blur_sigma,
        solarize,
    }
}

// ---------------------------------------------------------------------------
// Single-image kernels on HWC slices

/// Bilinear resize of `rect` to `oh × ow` with half-pixel centres.
fn resize_crop(img: &[f64], w: usize, c: usize, rect: CropRect, oh: usize, ow: usize) -> Vec<f64> {
    let sy = rect.height as f64 / oh as f64;
    let sx = rect.width as f64 / ow as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, sy, rect.height);
        for x in 0..ow {
            let (x0, x1, fx) = axis(x, sx, rect.width);
            let at = |yy: usize, xx: usize, ch: usize| {
                img[((rect.top + yy) * w + rect.left + xx) * c + ch]
            };
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                let bot = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn flip(img: &mut [f64], h: usize, w: usize, c: usize) {
    for y in 0..h {
        for x in 0..w / 2 {
            for ch in 0..c {
                img.swap((y * w + x) * c + ch, (y * w + (w - 1 - x)) * c + ch);
            }
        }
    }
}

const LUMA: [f64; 3] = [0.2989, 0.587, 0.114];

fn luma(px: &[f64]) -> f64 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

fn blend(img: &mut [f64], factor: f64, other: impl Fn(usize) -> f64) {
    for (i, v) in img.iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i)).clamp(0.0, 1.0);
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn jitter(img: &mut [f64], c: usize, d: &JitterDraw) {
    for op in d.order {
        match op {
            JitterOp::Brightness => blend(img, d.brightness, |_| 0.0),
            JitterOp::Contrast => {
                let mean = if c == 3 {
                    img.chunks(3).map(luma).sum::<f64>() / (img.len() / 3) as f64
                } else {
                    img.iter().sum::<f64>() / img.len() as f64
                };
                blend(img, d.contrast, |_| mean);
            }
            JitterOp::Saturation if c == 3 => {
                let gray: Vec<f64> = img.chunks(3).map(luma).collect();
                blend(img, d.saturation, |i| gray[i / 3]);
            }
            JitterOp::Hue if c == 3 => {
                for px in img.chunks_mut(3) {
                    let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                    let (r, g, b) = hsv_to_rgb(h + d.hue, s, v);
                    px[0] = r.clamp(0.0, 1.0);
                    px[1] = g.clamp(0.0, 1.0);
                    px[2] = b.clamp(0.0, 1.0);
                }
            }
            JitterOp::Saturation | JitterOp::Hue => {}
        }
    }
}

fn grayscale(img: &mut [f64], c: usize) {
    if c == 3 {
        for px in img.chunks_mut(3) {
            let l = luma(px).clamp(0.0, 1.0);
            px.fill(l);
        }
    }
}

/// Normalised truncated Gaussian of odd length `k`.
pub fn gaussian_kernel(sigma: f64, k: usize) -> Result<Vec<f64>> {
    if k.is_multiple_of(2) {
        return Err(Error::contract(format!("blur kernel size {k} is even")));
    }
    if !(sigma > 0.0) {
        return Err(Error::contract("blur sigma must be positive"));
    }
    let half = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

fn blur(img: &[f64], h: usize, w: usize, c: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[(y * w + x) * c + ch] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * img[(y * w + clamp(x as isize + k as isize - half, w)) * c + ch])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * tmp[(clamp(y as isize + k as isize - half, h) * w + x) * c + ch])
                    .sum();
            }
        }
    }
    out
}

fn solarize_px(v: f64) -> f64 {
    if v < 0.5 {
        v
    } else {
        1.0 - v
    }
}

/// Replays `draw` on one image, returning an `out_size` image.
pub fn apply_draw(
    spec: &AugmentationSpec,
    img: &[f64],
    h: usize,
    w: usize,
    c: usize,
    draw: &AugmentationDraw,
) -> Result<Vec<f64>> {
    let r = draw.crop;
    if r.height == 0 || r.width == 0 || r.top + r.height > h || r.left + r.width > w {
        return Err(Error::contract(format!("crop {r:?} outside {h}×{w}")));
    }
    let [oh, ow] = spec.out_size;
    let mut out = resize_crop(img, w, c, r, oh, ow);
    if draw.flip {
        flip(&mut out, oh, ow, c);
    }
    if let Some(j) = &draw.jitter {
        jitter(&mut out, c, j);
    }
    if draw.grayscale {
        grayscale(&mut out, c);
    }
    if let Some(sigma) = draw.blur_sigma {
        out = blur(&out, oh, ow, c, &gaussian_kernel(sigma, spec.blur_kernel)?);
    }
    if draw.solarize {
        out.iter_mut().for_each(|v| *v = solarize_px(*v));
    }
    for (i, v) in out.iter_mut().enumerate() {
        let ch = (i % c) % spec.mean.len();
        *v = (*v - spec.mean[ch]) / spec.std[ch];
    }
    Ok(out)
}

/// Applies one explicit draw per image.
pub fn replay(spec: &AugmentationSpec, batch: &ImageBatch, draws: &[AugmentationDraw]) -> Result<ImageBatch> {
    if draws.len() != batch.n {
        return Err(Error::contract("one draw per image required"));
    }
    batch.check_unit_range("augment")?;
    let [oh, ow] = spec.out_size;
    let mut pixels = Vec::with_capacity(batch.n * oh * ow * batch.c);
    for (i, d) in draws.iter().enumerate() {
        pixels.extend(apply_draw(spec, batch.image(i), batch.h, batch.w, batch.c, d)?);
    }
    ImageBatch::new(batch.n, oh, ow, batch.c, pixels)
}

/// Samples an independent draw per image from `rng` and applies the pipeline.
pub fn compose_pipeline(
    spec: &AugmentationSpec,
    batch: &ImageBatch,
    rng: &mut Rng,
) -> Result<(ImageBatch, Vec<AugmentationDraw>)> {
    spec.validate()?;
    if batch.h < 2 || batch.w < 2 {
        return Err(Error::contract("images must be at least 2×2"));
    }
    let draws: Vec<_> = (0..batch.n)
        .map(|_| sample_draw(spec, batch.h, batch.w, rng))
        .collect();
    Ok((replay(spec, batch, &draws)?, draws))
}

/// Augments every image with a stream keyed by `(seed, step, view, index)`,
/// so the result is the same however the work is scheduled.
pub fn augment_view(
    spec: &AugmentationSpec,
    batch: &ImageBatch,
    seed: u64,
    step: u64,
    view: u64,
    parallel: bool,
) -> Result<ImageBatch> {
    spec.validate()?;
    batch.check_unit_range("augment")?;
    let one = |i: usize| {
        let mut rng = stream(&[seed, step, view, i as u64]);
        let d = sample_draw(spec, batch.h, batch.w, &mut rng);
        apply_draw(spec, batch.image(i), batch.h, batch.w, batch.c, &d)
    };
    let images: Vec<Vec<f64>> = if parallel {
        (0..batch.n).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..batch.n).map(one).collect::<Result<_>>()?
    };
    let [oh, ow] = spec.out_size;
    ImageBatch::new(batch.n, oh, ow, batch.c, images.concat())
}

// ---------------------------------------------------------------------------
// Standalone batch operations

/// `x` below one half, `1 − x` otherwise.
pub fn solarize(batch: &ImageBatch) -> Result<ImageBatch> {
    batch.check_unit_range("solarize")?;
    Ok(batch.map_images(|img| img.iter().map(|&v| solarize_px(v)).collect()))
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(batch: &ImageBatch, sigma: f64, kernel_size: usize) -> Result<ImageBatch> {
    let k = gaussian_kernel(sigma, kernel_size)?;
    Ok(batch.map_images(|img| blur(img, batch.h, batch.w, batch.c, &k)))
}

/// Crops `rect` from every image and resizes it to `out` bilinearly.
pub fn resized_crop(batch: &ImageBatch, rect: CropRect, out: [usize; 2]) -> Result<ImageBatch> {
    if rect.height == 0 || rect.width == 0 || rect.top + rect.height > batch.h || rect.left + rect.width > batch.w {
        return Err(Error::contract(format!("crop {rect:?} outside {}×{}", batch.h, batch.w)));
    }
    let pixels = (0..batch.n)
        .flat_map(|i| resize_crop(batch.image(i), batch.w, batch.c, rect, out[0], out[1]))
        .collect();
    ImageBatch::new(batch.n, out[0], out[1], batch.c, pixels)
}

/// Random resized crop of every image (one rectangle per image).
pub fn random_resized_crop(spec: &AugmentationSpec, batch: &ImageBatch, rng: &mut Rng) -> Result<ImageBatch> {
    if batch.h < 2 || batch.w < 2 {
        return Err(Error::contract("images must be at least 2×2"));
    }
    let mut pixels = Vec::new();
    for i in 0..batch.n {
        let rect = sample_crop(spec, batch.h, batch.w, rng);
        pixels.extend(resize_crop(batch.image(i), batch.w, batch.c, rect, spec.out_size[0], spec.out_size[1]));
    }
    ImageBatch::new(batch.n, spec.out_size[0], spec.out_size[1], batch.c, pixels)
}

/// Grayscale with luminance weights replicated to every channel.
pub fn to_grayscale(batch: &ImageBatch) -> Result<ImageBatch> {
    batch.check_unit_range("grayscale")?;
    Ok(batch.map_images(|img| {
        let mut out = img.to_vec();
        grayscale(&mut out, batch.c);
        out
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn batch(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> ImageBatch {
        ImageBatch::new(1, h, w, c, (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn solarize_fixed_points() {
        let b = ImageBatch::new(1, 1, 3, 1, vec![0.3, 0.7, 0.5]).unwrap();
        let out = solarize(&b).unwrap().pixels;
        assert_eq!(out, vec![0.3, 1.0 - 0.7, 0.5]);
        assert!((out[1] - 0.3).abs() < 1e-15);
        let bad = ImageBatch::new(1, 1, 1, 1, vec![1.5]).unwrap();
        assert!(solarize(&bad).is_err());
    }

    #[test]
    fn blur_preserves_constants_and_delta() {
        let b = batch(5, 5, 3, |_| 0.42);
        for p in gaussian_blur(&b, 1.3, 5).unwrap().pixels {
            assert!((p - 0.42).abs() < 1e-15);
        }
        let r = batch(4, 4, 1, |i| (i as f64 * 0.13).fract());
        let out = gaussian_blur(&r, 1e-6, 3).unwrap();
        for (a, b) in out.pixels.iter().zip(&r.pixels) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(gaussian_blur(&r, 1.0, 4).is_err());
    }

    #[test]
    fn blur_impulse_matches_dense_convolution() {
        let row = [0.0, 0.0, 1.0, 0.0, 0.0];
        let b = ImageBatch::new(1, 1, 5, 1, row.to_vec()).unwrap();
        let out = gaussian_blur(&b, 1.0, 3).unwrap();
        let e = (-0.5f64).exp();
        let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
        // along the column axis the single row is clamped onto itself
        let ksum: f64 = k.iter().sum();
        for x in 0..5 {
            let mut want = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let src = (x as isize + t as isize - 1).clamp(0, 4) as usize;
                want += kv * row[src];
            }
            want *= ksum;
            assert!((out.pixels[x] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_sums_to_one() {
        for k in [1, 3, 5, 23] {
            for s in [0.1, 0.7, 2.0, 50.0] {
                let sum: f64 = gaussian_kernel(s, k).unwrap().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_crop_is_identity() {
        let spec = AugmentationSpec::disabled([6, 6]);
        let b = batch(6, 6, 3, |i| (i as f64 * 0.37).fract());
        let out = random_resized_crop(&spec, &b, &mut seeded(1)).unwrap();
        assert_eq!(out.pixels, b.pixels);
    }

    #[test]
    fn exact_subcrop_copies_pixels() {
        let b = batch(4, 4, 1, |i| ((i / 4 + i % 4) % 2) as f64);
        let rect = CropRect {
            top: 0,
            left: 0,
            height: 2,
            width: 2,
        };
        let out = resized_crop(&b, rect, [2, 2]).unwrap();
        assert_eq!(out.pixels, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn crop_sampling_is_seeded() {
        let spec = AugmentationSpec::default();
        let a = sample_crop(&spec, 16, 16, &mut seeded(5));
        let b = sample_crop(&spec, 16, 16, &mut seeded(5));
        assert_eq!(a, b);
    }

    #[test]
    fn disabled_pipeline_is_resize_and_normalize() {
        let spec = AugmentationSpec::disabled([4, 4]);
        let b = batch(4, 4, 3, |i| (i as f64 * 0.11).fract());
        let (out, _) = compose_pipeline(&spec, &b, &mut seeded(2)).unwrap();
        for (i, (o, x)) in out.pixels.iter().zip(&b.pixels).enumerate() {
            let ch = i % 3;
            assert_eq!(*o, (x - spec.mean[ch]) / spec.std[ch]);
        }
    }

    #[test]
    fn draws_differ_and_replay_exactly() {
        let spec = AugmentationSpec {
            out_size: [8, 8],
            ..AugmentationSpec::default()
        };
        let b = ImageBatch::new(2, 8, 8, 3, (0..384).map(|i| (i as f64 * 0.071).fract()).collect()).unwrap();
        let mut rng = seeded(3);
        let (out, draws) = compose_pipeline(&spec, &b, &mut rng).unwrap();
        assert_ne!(draws[0], draws[1]);
        let again = replay(&spec, &b, &draws).unwrap();
        assert!(out.pixels.iter().zip(&again.pixels).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn grayscale_of_gray_is_nearly_unchanged() {
        let b = batch(3, 3, 3, |i| ((i / 3) as f64 * 0.1).min(1.0));
        let g = to_grayscale(&b).unwrap();
        for (x, y) in g.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() <= 1e-4 * y + 1e-15);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for i in 0..200 {
            let (r, g, b) = ((i as f64 * 0.37).fract(), (i as f64 * 0.53).fract(), (i as f64 * 0.71).fract());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_independent_views() {
        let spec = AugmentationSpec::default();
        let b = ImageBatch::new(5, 16, 16, 3, (0..5 * 768).map(|i| (i as f64 * 0.013).fract()).collect()).unwrap();
        let s = augment_view(&spec, &b, 7, 3, 1, false).unwrap();
        let p = augment_view(&spec, &b, 7, 3, 1, true).unwrap();
        assert_eq!(s, p);
        assert_ne!(s, augment_view(&spec, &b, 7, 3, 0, false).unwrap());
    }

    #[test]
    fn invalid_spec_lists_keys() {
        let spec = AugmentationSpec {
            blur_kernel: 4,
            flip_prob: 2.0,
            ..AugmentationSpec::default()
        };
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("blur_kernel") && msg.contains("flip_prob"));
    }
}
