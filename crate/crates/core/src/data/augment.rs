//! Weak (flip) and strong (photometric) augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::boxgeom::{hflip_box, Annotation};
use crate::error::{Error, Result};
use crate::pixels::Image;
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub cutout_prob: f64,
    /// Inclusive range of patch counts.
    pub cutout_count: [usize; 2],
    /// Inclusive range of square patch sides in pixels.
    pub cutout_size: [usize; 2],
    pub cutout_fill: f32,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: [0.6, 1.4],
            contrast: [0.6, 1.4],
            saturation: [0.6, 1.4],
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.5, 1.5],
            cutout_prob: 0.7,
            cutout_count: [1, 3],
            cutout_size: [8, 20],
            cutout_fill: 0.5,
        }
    }
}

impl AugmentationConfig {
    /// Strong pipeline that leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: [1.0, 1.0],
            contrast: [1.0, 1.0],
            saturation: [1.0, 1.0],
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: [0.5, 1.5],
            cutout_prob: 0.0,
            cutout_count: [1, 1],
            cutout_size: [8, 8],
            cutout_fill: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("cutout_prob", self.cutout_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let ranges = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("blur_sigma", self.blur_sigma),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if self.cutout_count[0] > self.cutout_count[1] {
            return Err(Error::Config("cutout_count range is reversed".into()));
        }
        if self.cutout_size[0] == 0 || self.cutout_size[0] > self.cutout_size[1] {
            return Err(Error::Config("cutout_size range is invalid".into()));
        }
        if !(0.0..=1.0).contains(&self.cutout_fill) {
            return Err(Error::Config("cutout_fill must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Flip decision drawn from `seed` alone, so teacher and student views of the
/// same image can share it.
pub fn flip_decision(seed: u64, flip_prob: f64) -> bool {
    stream_rng(seed, "weak-flip", &[]).random_bool(flip_prob.clamp(0.0, 1.0))
}

/// Horizontal flip of pixels and annotations with probability `flip_prob`,
/// or as forced by `force_flip`.
pub fn weak_augment(
    img: &AnnotatedImage,
    seed: u64,
    force_flip: Option<bool>,
    flip_prob: f64,
) -> AnnotatedImage {
    let flip = force_flip.unwrap_or_else(|| flip_decision(seed, flip_prob));
    if !flip {
        return img.clone();
    }
    let w = img.pixels.width as f64;
    AnnotatedImage {
        image_id: img.image_id.clone(),
        pixels: img.pixels.hflip(),
        annotations: img
            .annotations
            .iter()
            .map(|a| Annotation::new(hflip_box(&a.bbox, w), a.class_id))
            .collect(),
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn luma(img: &Image) -> Vec<f32> {
    if img.channels < 3 {
        return img.plane(0).to_vec();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len())
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect()
}

fn blend_with(img: &mut Image, other: &[f32], factor: f32) {
    for c in 0..img.channels {
        for (v, o) in img.plane_mut(c).iter_mut().zip(other) {
            *v = o + factor * (*v - o);
        }
    }
}

fn brightness(img: &mut Image, f: f32) {
    img.data.iter_mut().for_each(|v| *v *= f);
    img.clamp01();
}

fn contrast(img: &mut Image, f: f32) {
    let l = luma(img);
    let mean = l.iter().sum::<f32>() / l.len().max(1) as f32;
    blend_with(img, &vec![mean; l.len()], f);
    img.clamp01();
}

fn saturation(img: &mut Image, f: f32) {
    let l = luma(img);
    blend_with(img, &l, f);
    img.clamp01();
}

fn grayscale(img: &mut Image) {
    let l = luma(img);
    for c in 0..img.channels {
        img.plane_mut(c).copy_from_slice(&l);
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (img.height as i64, img.width as i64);
    let mut out = img.clone();
    let mut tmp = vec![0.0f32; img.height * img.width];
    for c in 0..img.channels {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = (x + j as i64 - r).clamp(0, w - 1);
                    acc += kv * src[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = (y + j as i64 - r).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
    }
    out
}

/// Fills a `size`×`size` square whose top-left corner is `(x0, y0)`.
pub fn cutout(img: &mut Image, x0: usize, y0: usize, size: usize, fill: f32) {
    for c in 0..img.channels {
        for y in y0..(y0 + size).min(img.height) {
            for x in x0..(x0 + size).min(img.width) {
                img.set(c, y, x, fill);
            }
        }
    }
}

/// Photometric pipeline: jitter, grayscale, blur, cutout, in that order.
/// Geometry is never altered.
pub fn strong_augment(pixels: &Image, seed: u64, cfg: &AugmentationConfig) -> Image {
    let mut rng = stream_rng(seed, "strong-aug", &[]);
    let mut img = pixels.clone();

    if rng.random_bool(cfg.jitter_prob) {
        let b = uniform(&mut rng, cfg.brightness) as f32;
        let c = uniform(&mut rng, cfg.contrast) as f32;
        let s = uniform(&mut rng, cfg.saturation) as f32;
        if b != 1.0 {
            brightness(&mut img, b);
        }
        if c != 1.0 {
            contrast(&mut img, c);
        }
        if s != 1.0 {
            saturation(&mut img, s);
        }
    }
    if rng.random_bool(cfg.grayscale_prob) {
        grayscale(&mut img);
    }
    if rng.random_bool(cfg.blur_prob) {
        img = gaussian_blur(&img, uniform(&mut rng, cfg.blur_sigma));
    }
    if rng.random_bool(cfg.cutout_prob) {
        let n = rng.random_range(cfg.cutout_count[0]..=cfg.cutout_count[1]);
        for _ in 0..n {
            let size = rng
                .random_range(cfg.cutout_size[0]..=cfg.cutout_size[1])
                .min(img.width)
                .min(img.height);
            let x0 = rng.random_range(0..=img.width - size);
            let y0 = rng.random_range(0..=img.height - size);
            cutout(&mut img, x0, y0, size, cfg.cutout_fill);
        }
    }
    img.clamp01();
    img
}
