//! Training-target assignment for anchors and region proposals.

use crate::boxgeom::{encode_deltas, iou, Annotation, BBox, DeltaVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assigned {
    /// Matched to the ground-truth object at this index.
    Positive { gt: usize },
    /// Background.
    Negative,
    /// Contributes to no loss.
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub labels: Vec<Assigned>,
    /// Regression target per entry; zero unless positive.
    pub deltas: Vec<DeltaVector>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, Assigned::Positive { .. }))
            .count()
    }
}

/// Best-overlapping ground truth per box; ties go to the lower index.
fn best_match(b: &BBox, gts: &[Annotation]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        let v = iou(b, &gt.bbox);
        if best.is_none_or(|(_, m)| v > m) {
            best = Some((g, v));
        }
    }
    best
}

/// RPN targets: positive at IoU >= `iou_pos`, negative below `iou_neg`,
/// ignored in between. Each ground truth additionally claims the anchors of
/// maximal overlap with it (when that overlap is non-zero), keeping their own
/// best match.
pub fn assign_anchor_targets(
    anchors: &[BBox],
    ground_truth: &[Annotation],
    iou_pos: f64,
    iou_neg: f64,
) -> TargetAssignment {
    let matches: Vec<Option<(usize, f64)>> =
        anchors.iter().map(|a| best_match(a, ground_truth)).collect();
    let mut labels: Vec<Assigned> = matches
        .iter()
        .map(|m| match *m {
            Some((g, v)) if v >= iou_pos => Assigned::Positive { gt: g },
            Some((_, v)) if v >= iou_neg => Assigned::Ignore,
            _ => Assigned::Negative,
        })
        .collect();

    for gt in ground_truth {
        let best = anchors
            .iter()
            .map(|a| iou(a, &gt.bbox))
            .fold(0.0f64, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (k, a) in anchors.iter().enumerate() {
            if iou(a, &gt.bbox) == best {
                let (g, _) = matches[k].expect("overlapping anchor has a match");
                labels[k] = Assigned::Positive { gt: g };
            }
        }
    }

    let deltas = labels
        .iter()
        .zip(anchors)
        .map(|(l, a)| match l {
            Assigned::Positive { gt } => encode_deltas(a, &ground_truth[*gt].bbox),
            _ => DeltaVector::ZERO,
        })
        .collect();
    TargetAssignment { labels, deltas }
}

/// ROI targets: a proposal takes the class of its best-matching ground truth
/// when IoU >= `iou_fg`, otherwise it is background.
pub fn assign_roi_targets(
    proposals: &[BBox],
    ground_truth: &[Annotation],
    iou_fg: f64,
) -> TargetAssignment {
    let labels: Vec<Assigned> = proposals
        .iter()
        .map(|p| match best_match(p, ground_truth) {
            Some((g, v)) if v >= iou_fg => Assigned::Positive { gt: g },
            _ => Assigned::Negative,
        })
        .collect();
    let deltas = labels
        .iter()
        .zip(proposals)
        .map(|(l, p)| match l {
            Assigned::Positive { gt } => encode_deltas(p, &ground_truth[*gt].bbox),
            _ => DeltaVector::ZERO,
        })
        .collect();
    TargetAssignment { labels, deltas }
}
