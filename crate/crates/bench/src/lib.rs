//! Input generators shared by the benchmarks.

use lbt_core::{Annotation, BBox, Detection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    let x = rng.random_range(0.0..extent * 0.8);
    let y = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(4.0..extent * 0.2);
    let h = rng.random_range(4.0..extent * 0.2);
    BBox::new(x, y, x + w, y + h).expect("positive extent")
}

/// `n` scored detections spread over `classes` classes.
pub fn random_detections(n: usize, classes: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let b = random_box(&mut rng, 128.0);
            Detection::new(b, rng.random_range(0..classes), rng.random())
        })
        .collect()
}

/// Per-image detections and ground truth, detections jittered off the truth
/// plus some clutter.
pub fn eval_fixture(images: usize, classes: usize, seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<Annotation>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dets = Vec::with_capacity(images);
    let mut gts = Vec::with_capacity(images);
    for _ in 0..images {
        let g: Vec<Annotation> = (0..rng.random_range(1..5))
            .map(|_| Annotation::new(random_box(&mut rng, 128.0), rng.random_range(0..classes)))
            .collect();
        let mut d: Vec<Detection> = g
            .iter()
            .map(|a| {
                let j = rng.random_range(-3.0..3.0);
                let b = BBox::new(a.bbox.x1 + j, a.bbox.y1 + j, a.bbox.x2 + j, a.bbox.y2 + j).unwrap();
                Detection::new(b, a.class_id, rng.random())
            })
            .collect();
        d.extend(random_detections(20, classes, rng.random()));
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}
