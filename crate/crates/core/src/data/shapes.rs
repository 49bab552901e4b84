//! Procedural shape scenes: circles, squares and triangles on a
//! textured noise background.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::boxgeom::{iou, Annotation, BBox};
use crate::error::{Error, Result};
use crate::pixels::Image;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    /// Class list; the class id of a shape is its index here.
    pub classes: Vec<ShapeKind>,
    /// Relative sampling frequency per class.
    pub class_weights: Vec<f64>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    /// Upper bound on the IoU between any two objects of a scene.
    pub max_pair_iou: f64,
    /// Amplitude of per-pixel background noise.
    pub noise: f64,
    /// Minimum mean absolute channel difference between a shape's fill and
    /// the background base color.
    pub min_contrast: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            n_train: 2000,
            n_test: 500,
            image_size: 96,
            classes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            class_weights: vec![3.0, 2.0, 1.0],
            min_objects: 1,
            max_objects: 4,
            min_object_size: 12,
            max_object_size: 40,
            max_pair_iou: 0.4,
            noise: 0.08,
            min_contrast: 0.25,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("shapes: {m}")));
        if self.classes.is_empty() || self.classes.len() != self.class_weights.len() {
            return fail("classes and class_weights must be non-empty and of equal length");
        }
        if self.classes.iter().enumerate().any(|(i, c)| self.classes[..i].contains(c)) {
            return fail("classes must be distinct");
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return fail("class weights must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 4 {
            return fail("objects per image must satisfy 1 <= min <= max <= 4");
        }
        if self.min_object_size < 12
            || self.max_object_size > 40
            || self.min_object_size > self.max_object_size
            || self.max_object_size >= self.image_size
        {
            return fail("object sizes must lie in 12..=40 and fit the image");
        }
        if !(self.max_pair_iou > 0.0 && self.max_pair_iou <= 0.4) {
            return fail("max_pair_iou must lie in (0, 0.4]");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return fail("n_train and n_test must be positive");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name().to_string()).collect()
    }
}

/// Pixel coverage test at pixel centers.
struct Shape {
    kind: ShapeKind,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl Shape {
    fn covers(&self, px: f64, py: f64) -> bool {
        match self.kind {
            ShapeKind::Square => {
                px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
            }
            ShapeKind::Circle => {
                let r = 0.5 * self.w;
                let (cx, cy) = (self.x + r, self.y + r);
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // Apex at top center, base along the bottom edge.
                let t = (py - self.y) / self.h;
                if !(0.0..1.0).contains(&t) {
                    return false;
                }
                let half = 0.5 * self.w * t;
                let cx = self.x + 0.5 * self.w;
                px >= cx - half && px < cx + half
            }
        }
    }

    /// Covered pixel indices and their tight half-open bounding box.
    fn rasterize(&self, size: usize) -> Option<(Vec<usize>, BBox)> {
        let x0 = self.x.floor().max(0.0) as usize;
        let y0 = self.y.floor().max(0.0) as usize;
        let x1 = ((self.x + self.w).ceil() as usize + 1).min(size);
        let y1 = ((self.y + self.h).ceil() as usize + 1).min(size);
        let mut pix = Vec::new();
        let (mut bx1, mut by1, mut bx2, mut by2) = (usize::MAX, usize::MAX, 0, 0);
        for py in y0..y1 {
            for px in x0..x1 {
                if self.covers(px as f64 + 0.5, py as f64 + 0.5) {
                    pix.push(py * size + px);
                    bx1 = bx1.min(px);
                    by1 = by1.min(py);
                    bx2 = bx2.max(px + 1);
                    by2 = by2.max(py + 1);
                }
            }
        }
        if pix.is_empty() {
            return None;
        }
        let b = BBox::new(bx1 as f64, by1 as f64, bx2 as f64, by2 as f64).ok()?;
        Some((pix, b))
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn background(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> ([f64; 3], Vec<[f64; 3]>) {
    let n = cfg.image_size;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    // Two random plane waves give a low-frequency texture.
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.02..0.25),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.1),
            )
        })
        .collect();
    let mut px = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let mut t = 0.0;
            for &(freq, angle, phase, amp) in &waves {
                let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                t += amp * (freq * u + phase).sin();
            }
            px.push(std::array::from_fn(|c| {
                base[c] + t + rng.random_range(-cfg.noise..=cfg.noise)
            }));
        }
    }
    (base, px)
}

fn fill_color(cfg: &ShapesConfig, base: &[f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let diff = c.iter().zip(base).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if diff >= cfg.min_contrast {
            return c;
        }
    }
}

fn sample_class(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = cfg.class_weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in cfg.class_weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    cfg.class_weights.len() - 1
}

const PLACEMENT_TRIES: usize = 100;

fn try_render(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> Option<(Image, Vec<Annotation>)> {
    let n = cfg.image_size;
    let (base, mut px) = background(cfg, rng);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = sample_class(cfg, rng);
        let kind = cfg.classes[class_id];
        let color = fill_color(cfg, &base, rng);
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.random_range(cfg.min_object_size..=cfg.max_object_size) as f64;
            let h = match kind {
                ShapeKind::Triangle => (w * rng.random_range(0.8..1.2))
                    .clamp(cfg.min_object_size as f64, cfg.max_object_size as f64),
                _ => w,
            };
            let x = rng.random_range(0.0..=(n as f64 - w - 1.0));
            let y = rng.random_range(0.0..=(n as f64 - h - 1.0));
            let shape = Shape { kind, x, y, w, h };
            let Some((pix, bbox)) = shape.rasterize(n) else {
                continue;
            };
            if annotations
                .iter()
                .all(|a| iou(&a.bbox, &bbox) <= cfg.max_pair_iou)
            {
                placed = Some((pix, bbox));
                break;
            }
        }
        let (pix, bbox) = placed?;
        for i in pix {
            px[i] = color;
        }
        annotations.push(Annotation::new(bbox, class_id));
    }
    let mut img = Image::new(3, n, n);
    for (i, p) in px.iter().enumerate() {
        for (c, v) in p.iter().enumerate() {
            img.data[c * n * n + i] = quantize(*v);
        }
    }
    Some((img, annotations))
}

/// Renders one scene. A scene whose objects cannot all be placed is thrown
/// away and redrawn from the next attempt's seed.
pub fn render_scene(cfg: &ShapesConfig, seed: u64, split: &str, index: usize) -> AnnotatedImage {
    for attempt in 0u64.. {
        let mut rng = stream_rng(seed, "shapes", &[split_tag(split), index as u64, attempt]);
        if let Some((pixels, annotations)) = try_render(cfg, &mut rng) {
            return AnnotatedImage {
                image_id: format!("{split}_{index:05}"),
                pixels,
                annotations,
            };
        }
    }
    unreachable!("attempt counter is unbounded")
}

fn split_tag(split: &str) -> u64 {
    match split {
        "train" => 1,
        "test" => 2,
        _ => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let cfg = ShapesConfig::default();
        assert_eq!(render_scene(&cfg, 4, "train", 7), render_scene(&cfg, 4, "train", 7));
        assert_ne!(
            render_scene(&cfg, 4, "train", 7).pixels,
            render_scene(&cfg, 4, "train", 8).pixels
        );
    }

    #[test]
    fn scene_constraints_hold() {
        let cfg = ShapesConfig::default();
        for i in 0..60 {
            let s = render_scene(&cfg, 1, "train", i);
            assert!((1..=4).contains(&s.annotations.len()));
            for (j, a) in s.annotations.iter().enumerate() {
                assert!(a.bbox.inside(96.0, 96.0));
                assert!(a.class_id < 3);
                let side = a.bbox.width().max(a.bbox.height());
                assert!((11.0..=41.0).contains(&side), "side {side}");
                for b in &s.annotations[..j] {
                    assert!(iou(&a.bbox, &b.bbox) <= 0.4);
                }
            }
            assert!(s.pixels.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s
                .pixels
                .data
                .iter()
                .all(|v| ((v * 255.0).round() / 255.0 - v).abs() < 1e-7));
        }
    }

    #[test]
    fn boxes_tightly_bound_rasterized_shapes() {
        let mut rng = stream_rng(0, "t", &[]);
        for kind in [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle] {
            for _ in 0..20 {
                let w = rng.random_range(12.0..40.0f64).round();
                let shape = Shape {
                    kind,
                    x: rng.random_range(0.0..50.0),
                    y: rng.random_range(0.0..50.0),
                    w,
                    h: w,
                };
                let (pix, b) = shape.rasterize(96).unwrap();
                let xs: Vec<usize> = pix.iter().map(|p| p % 96).collect();
                let ys: Vec<usize> = pix.iter().map(|p| p / 96).collect();
                assert_eq!(b.x1, *xs.iter().min().unwrap() as f64);
                assert_eq!(b.x2, (*xs.iter().max().unwrap() + 1) as f64);
                assert_eq!(b.y1, *ys.iter().min().unwrap() as f64);
                assert_eq!(b.y2, (*ys.iter().max().unwrap() + 1) as f64);
            }
        }
    }

    #[test]
    fn class_frequencies_follow_weights() {
        let cfg = ShapesConfig::default();
        let mut counts = [0usize; 3];
        let mut rng = stream_rng(9, "freq", &[]);
        for _ in 0..6000 {
            counts[sample_class(&cfg, &mut rng)] += 1;
        }
        let ratio = counts[0] as f64 / counts[2] as f64;
        assert!((2.6..3.4).contains(&ratio), "{counts:?}");
    }
}
