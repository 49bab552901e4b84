//! Teacher pseudo-labels for unlabeled images: class-wise NMS, then the
//! confidence threshold.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{decode_deltas_clipped, nms, Annotation, Detection};
use crate::detector::{forward, DetectorOutputs, DetectorParams, RoiSource};
use crate::error::{Error, Result};
use crate::eval::match_detections;
use crate::pixels::Image;

pub const DEFAULT_DELTA: f64 = 0.7;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    #[serde(rename = "iteration")]
    pub teacher_iteration: u64,
    pub image_id: String,
    pub labels: Vec<Detection>,
    #[serde(rename = "delta")]
    pub delta_used: f64,
}

impl PseudoLabelSet {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.labels
            .iter()
            .map(|d| Annotation::new(d.bbox, d.class_id))
            .collect()
    }
}

/// One candidate per proposal: the refined box with the most probable
/// foreground class, scored by that class probability.
pub fn teacher_candidates(out: &DetectorOutputs, image_size: f64) -> Vec<Detection> {
    let k = out.num_classes();
    out.proposals
        .iter()
        .zip(&out.roi_class_probs)
        .zip(&out.roi_deltas)
        .filter_map(|((p, probs), d)| {
            let b = decode_deltas_clipped(p, d, image_size, image_size)?;
            let (c, &s) = probs[..k]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
            Some(Detection::new(b, c, s))
        })
        .collect()
}

/// Class-wise NMS followed by `score >= delta`, in descending score order.
pub fn filter_candidates(cands: &[Detection], delta: f64, nms_threshold: f64) -> Vec<Detection> {
    nms(cands, nms_threshold, true)
        .into_iter()
        .map(|i| cands[i])
        .filter(|d| d.score >= delta)
        .collect()
}

/// Pseudo-labels from outputs the teacher already produced.
pub fn pseudo_labels_from_outputs(
    out: &DetectorOutputs,
    image_size: f64,
    image_id: &str,
    delta: f64,
    nms_threshold: f64,
    teacher_iteration: u64,
) -> PseudoLabelSet {
    PseudoLabelSet {
        teacher_iteration,
        image_id: image_id.to_string(),
        labels: filter_candidates(&teacher_candidates(out, image_size), delta, nms_threshold),
        delta_used: delta,
    }
}

/// Runs the teacher on the weakly augmented view `image`.
pub fn generate_pseudo_labels(
    teacher: &DetectorParams,
    image: &Image,
    image_id: &str,
    delta: f64,
    nms_threshold: f64,
    teacher_iteration: u64,
) -> Result<PseudoLabelSet> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config(format!("pseudo-label threshold {delta} outside (0, 1]")));
    }
    let out = forward(teacher, image, RoiSource::Rpn)?;
    Ok(pseudo_labels_from_outputs(
        &out,
        teacher.arch.image_size as f64,
        image_id,
        delta,
        nms_threshold,
        teacher_iteration,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub pseudo: usize,
    pub correct: usize,
    pub ground_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    pub precision: f64,
    pub recall: f64,
    pub num_pseudo: usize,
    pub num_correct: usize,
    pub num_ground_truth: usize,
    pub per_class: Vec<ClassCounts>,
}

impl PseudoLabelStats {
    fn from_counts(per_class: Vec<ClassCounts>) -> Self {
        let num_pseudo = per_class.iter().map(|c| c.pseudo).sum();
        let num_correct = per_class.iter().map(|c| c.correct).sum();
        let num_ground_truth = per_class.iter().map(|c| c.ground_truth).sum();
        let ratio = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        PseudoLabelStats {
            precision: ratio(num_correct, num_pseudo),
            recall: if num_ground_truth == 0 {
                1.0
            } else {
                num_correct as f64 / num_ground_truth as f64
            },
            num_pseudo,
            num_correct,
            num_ground_truth,
            per_class,
        }
    }

    /// Pools several images' statistics.
    pub fn merge(items: &[PseudoLabelStats], num_classes: usize) -> Self {
        let mut per_class = vec![
            ClassCounts {
                pseudo: 0,
                correct: 0,
                ground_truth: 0
            };
            num_classes
        ];
        for s in items {
            for (acc, c) in per_class.iter_mut().zip(&s.per_class) {
                acc.pseudo += c.pseudo;
                acc.correct += c.correct;
                acc.ground_truth += c.ground_truth;
            }
        }
        Self::from_counts(per_class)
    }
}

/// Pseudo-label quality against withheld ground truth. An empty pseudo set
/// reports precision 1.
pub fn pseudo_label_stats(
    pls: &PseudoLabelSet,
    ground_truth: &[Annotation],
    iou_threshold: f64,
    num_classes: usize,
) -> PseudoLabelStats {
    let flags = match_detections(&pls.labels, ground_truth, iou_threshold);
    let mut per_class: Vec<ClassCounts> = (0..num_classes)
        .map(|c| ClassCounts {
            pseudo: 0,
            correct: 0,
            ground_truth: ground_truth.iter().filter(|g| g.class_id == c).count(),
        })
        .collect();
    for (d, &tp) in pls.labels.iter().zip(&flags) {
        if let Some(c) = per_class.get_mut(d.class_id) {
            c.pseudo += 1;
            c.correct += tp as usize;
        }
    }
    PseudoLabelStats::from_counts(per_class)
}

/// Appends one JSON line per set.
pub fn append_jsonl(path: &Path, sets: &[PseudoLabelSet]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for s in sets {
        buf.push_str(&serde_json::to_string(s).map_err(|e| Error::json(path, e))?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}
