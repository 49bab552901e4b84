//! COCO-style detection evaluation: greedy matching, 101-point interpolated
//! AP at IoU 0.50 and averaged over 0.50:0.95.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, Annotation, Detection};
use crate::data::AnnotatedImage;
use crate::detector::{detect, DetectorParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Per-detection TP flags, aligned with the input order. Detections are
/// visited by descending score; each claims the highest-IoU unmatched
/// same-class ground truth with IoU >= `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, m)| v > m) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            flags[i] = true;
        }
    }
    flags
}

/// 101-point interpolated AP from TP flags in descending score order.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    // (cumulative TP, precision) at each rank.
    let mut curve: Vec<(usize, f64)> = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        curve.push((tp, tp as f64 / (k + 1) as f64));
    }
    // Running max from the right gives the interpolated precision envelope.
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    // Recall points served by each rank; summing count * precision avoids
    // the drift of adding the same value up to 101 times.
    let mut served = vec![0usize; curve.len()];
    let mut k = 0;
    for r in 0..=100usize {
        // recall >= r/100, compared exactly in integers.
        while k < curve.len() && curve[k].0 * 100 < r * n_gt {
            k += 1;
        }
        if k == curve.len() {
            break;
        }
        served[k] += 1;
    }
    let sum: f64 = served
        .iter()
        .zip(&curve)
        .filter(|(&n, _)| n > 0)
        .map(|(&n, &(_, p))| n as f64 * p)
        .sum();
    sum / 101.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    /// AP at each entry of `EvalReport::iou_thresholds`.
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub per_class: Vec<ClassReport>,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    /// AP averaged over IoU 0.50:0.95.
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_images: usize,
    pub num_ground_truth: usize,
    pub num_detections: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores precomputed detections; `detections[i]` belongs to `ground_truth[i]`.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    class_names: &[String],
) -> Result<EvalReport> {
    if ground_truth.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if detections.len() != ground_truth.len() {
        return Err(Error::LengthMismatch {
            what: "detections per image vs images",
            left: detections.len(),
            right: ground_truth.len(),
        });
    }
    let thresholds = iou_thresholds();
    let nc = class_names.len();
    // flags[t][c]: (score, image, det index, tp) for every detection.
    let mut pooled: Vec<Vec<Vec<(f64, usize, usize, bool)>>> = vec![vec![Vec::new(); nc]; thresholds.len()];
    for (img, (dets, gts)) in detections.iter().zip(ground_truth).enumerate() {
        for (t, &thr) in thresholds.iter().enumerate() {
            let flags = match_detections(dets, gts, thr);
            for (j, (d, f)) in dets.iter().zip(flags).enumerate() {
                if let Some(bucket) = pooled[t].get_mut(d.class_id) {
                    bucket.push((d.score, img, j, f));
                }
            }
        }
    }
    let mut per_class = Vec::with_capacity(nc);
    for (c, name) in class_names.iter().enumerate() {
        let n_gt = ground_truth
            .iter()
            .map(|g| g.iter().filter(|a| a.class_id == c).count())
            .sum();
        let mut ap = Vec::with_capacity(thresholds.len());
        for bucket in pooled.iter_mut() {
            let b = &mut bucket[c];
            b.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let flags: Vec<bool> = b.iter().map(|e| e.3).collect();
            ap.push(average_precision(&flags, n_gt));
        }
        per_class.push(ClassReport {
            class_id: c,
            name: name.clone(),
            num_ground_truth: n_gt,
            num_detections: pooled[0][c].len(),
            ap,
        });
    }
    let scored: Vec<&ClassReport> = per_class.iter().filter(|c| c.num_ground_truth > 0).collect();
    if scored.is_empty() {
        return Err(Error::Empty("ground-truth objects"));
    }
    let n = scored.len() as f64;
    let ap50 = scored.iter().map(|c| c.ap[0]).sum::<f64>() / n;
    let map = scored
        .iter()
        .map(|c| c.ap.iter().sum::<f64>() / c.ap.len() as f64)
        .sum::<f64>()
        / n;
    Ok(EvalReport {
        iou_thresholds: thresholds,
        num_images: ground_truth.len(),
        num_ground_truth: per_class.iter().map(|c| c.num_ground_truth).sum(),
        num_detections: detections.iter().map(Vec::len).sum(),
        per_class,
        ap50,
        map,
    })
}

/// Runs the detector on every image of `split` and scores the result.
pub fn evaluate(
    params: &DetectorParams,
    split: &[AnnotatedImage],
    class_names: &[String],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let dets = split
        .iter()
        .map(|a| {
            detect(
                params,
                &a.pixels,
                settings.score_threshold,
                settings.nms_threshold,
                settings.max_detections,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<Annotation>> = split.iter().map(|a| a.annotations.clone()).collect();
    evaluate_detections(&dets, &gts, class_names)
}
