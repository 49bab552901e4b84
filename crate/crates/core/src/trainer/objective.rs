//! Per-image loss terms and their gradients with respect to detector outputs.

use rand::seq::index::sample;
use rand::Rng;

use crate::boxgeom::{hflip_box, Annotation, BBox, DeltaVector};
use crate::detector::{
    assign_anchor_targets, assign_roi_targets, Assigned, DetectorOutputs, OutputGrads,
};
use crate::error::Result;
use crate::losses::{
    background_mask, consistency_loc_grad, consistency_loc_loss, cross_entropy,
    cross_entropy_grad, focal_loss, focal_loss_grad, smooth_l1, smooth_l1_grad, SupervisedTerms,
};

/// Target-assignment and sampling settings shared by supervised and
/// pseudo-label terms.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TargetSettings {
    pub rpn_iou_pos: f64,
    pub rpn_iou_neg: f64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub roi_iou_fg: f64,
    pub beta: f64,
}

/// Picks up to `batch` labeled anchors, at most `fraction` of them positive.
pub(crate) fn sample_anchors(labels: &[Assigned], batch: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len())
        .filter(|&k| matches!(labels[k], Assigned::Positive { .. }))
        .collect();
    let neg: Vec<usize> = (0..labels.len())
        .filter(|&k| labels[k] == Assigned::Negative)
        .collect();
    let n_pos = pos.len().min((batch as f64 * fraction).floor() as usize);
    let n_neg = neg.len().min(batch - n_pos);
    let mut out: Vec<usize> = sample(rng, pos.len(), n_pos).into_iter().map(|i| pos[i]).collect();
    out.extend(sample(rng, neg.len(), n_neg).into_iter().map(|i| neg[i]));
    out.sort_unstable();
    out
}

/// RPN objectness cross-entropy over sampled anchors and box regression over
/// the sampled positives. Returns `(cls, reg)`.
pub(crate) fn rpn_terms(
    out: &DetectorOutputs,
    targets: &[Annotation],
    s: &TargetSettings,
    rng: &mut impl Rng,
    with_reg: bool,
    grads: &mut OutputGrads,
    scale: f64,
) -> (f64, f64) {
    let assign = assign_anchor_targets(&out.anchors, targets, s.rpn_iou_pos, s.rpn_iou_neg);
    let picked = sample_anchors(&assign.labels, s.rpn_batch, s.rpn_positive_fraction, rng);
    if picked.is_empty() {
        return (0.0, 0.0);
    }
    let n = picked.len() as f64;
    let n_pos = picked
        .iter()
        .filter(|&&k| matches!(assign.labels[k], Assigned::Positive { .. }))
        .count()
        .max(1) as f64;
    let (mut cls, mut reg) = (0.0, 0.0);
    for &k in &picked {
        let probs = out.rpn_probs(k);
        let positive = matches!(assign.labels[k], Assigned::Positive { .. });
        let t = if positive { 0 } else { 1 };
        cls += cross_entropy(&probs, t) / n;
        grads.add_rpn_prob_grad(out, k, &cross_entropy_grad(&probs, t), scale / n);
        if positive && with_reg {
            reg += smooth_l1(&out.rpn_deltas[k], &assign.deltas[k], s.beta) / n_pos;
            let g = smooth_l1_grad(&out.rpn_deltas[k], &assign.deltas[k], s.beta);
            grads.add_rpn_delta_grad(k, &g, scale / n_pos);
        }
    }
    (cls, reg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum RoiClassLoss {
    CrossEntropy,
    Focal(f64),
}

/// ROI classification averaged over all ROIs and regression over foreground
/// ROIs. Returns `(cls, reg)`.
pub(crate) fn roi_terms(
    out: &DetectorOutputs,
    targets: &[Annotation],
    s: &TargetSettings,
    kind: RoiClassLoss,
    with_reg: bool,
    grads: &mut OutputGrads,
    scale: f64,
) -> (f64, f64) {
    let rois = out.proposals.len();
    if rois == 0 {
        return (0.0, 0.0);
    }
    let bg = out.num_classes();
    let assign = assign_roi_targets(&out.proposals, targets, s.roi_iou_fg);
    let n = rois as f64;
    let n_fg = assign.num_positive().max(1) as f64;
    let (mut cls, mut reg) = (0.0, 0.0);
    for r in 0..rois {
        let probs = &out.roi_class_probs[r];
        let t = match assign.labels[r] {
            Assigned::Positive { gt } => targets[gt].class_id,
            _ => bg,
        };
        let (l, g) = match kind {
            RoiClassLoss::CrossEntropy => (cross_entropy(probs, t), cross_entropy_grad(probs, t)),
            RoiClassLoss::Focal(gamma) => (focal_loss(probs, t, gamma), focal_loss_grad(probs, t, gamma)),
        };
        cls += l / n;
        grads.add_roi_prob_grad(out, r, &g, scale / n);
        if t != bg && with_reg {
            reg += smooth_l1(&out.roi_deltas[r], &assign.deltas[r], s.beta) / n_fg;
            let g = smooth_l1_grad(&out.roi_deltas[r], &assign.deltas[r], s.beta);
            grads.add_roi_delta_grad(r, &g, scale / n_fg);
        }
    }
    (cls, reg)
}

/// The four supervised terms of one image.
pub(crate) fn supervised_terms(
    out: &DetectorOutputs,
    gts: &[Annotation],
    s: &TargetSettings,
    rng: &mut impl Rng,
    grads: &mut OutputGrads,
    scale: f64,
) -> SupervisedTerms {
    let (rpn_cls, rpn_reg) = rpn_terms(out, gts, s, rng, true, grads, scale);
    let (roi_cls, roi_reg) = roi_terms(out, gts, s, RoiClassLoss::CrossEntropy, true, grads, scale);
    SupervisedTerms {
        rpn_cls,
        rpn_reg,
        roi_cls,
        roi_reg,
    }
}

/// Boxes for the ROI pass on the flipped image: each ROI mirrored, so ROI `i`
/// of both passes covers the same content.
pub(crate) fn mirrored_rois(out: &DetectorOutputs, image_width: f64) -> Vec<BBox> {
    out.proposals.iter().map(|b| hflip_box(b, image_width)).collect()
}

/// Which detector levels the flip-consistency term covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConsistencyLevels {
    pub rpn: bool,
    pub roi: bool,
}

/// Flip-consistency between an image's pass and the pass on its mirror. RPN
/// anchors pair through `perm`; ROIs pair index-wise. Masks come from the
/// original pass. The value is the sum of the enabled levels.
#[allow(clippy::too_many_arguments)]
pub(crate) fn consistency_terms(
    orig: &DetectorOutputs,
    flip: &DetectorOutputs,
    perm: &[usize],
    tau_bg: f64,
    levels: ConsistencyLevels,
    g_orig: &mut OutputGrads,
    g_flip: &mut OutputGrads,
    scale: f64,
) -> Result<f64> {
    let mut total = 0.0;
    if levels.rpn {
        let probs: Vec<[f64; 2]> = (0..orig.anchors.len()).map(|k| orig.rpn_probs(k)).collect();
        let mask = background_mask(&probs, tau_bg);
        let partner: Vec<DeltaVector> = perm.iter().map(|&m| flip.rpn_deltas[m]).collect();
        total += consistency_loc_loss(&orig.rpn_deltas, &partner, &mask)?;
        let (go, gf) = consistency_loc_grad(&orig.rpn_deltas, &partner, &mask)?;
        for (k, (a, b)) in go.iter().zip(&gf).enumerate() {
            if mask[k] {
                g_orig.add_rpn_delta_grad(k, a, scale);
                g_flip.add_rpn_delta_grad(perm[k], b, scale);
            }
        }
    }
    if levels.roi {
        let mask = background_mask(&orig.roi_class_probs, tau_bg);
        total += consistency_loc_loss(&orig.roi_deltas, &flip.roi_deltas, &mask)?;
        let (go, gf) = consistency_loc_grad(&orig.roi_deltas, &flip.roi_deltas, &mask)?;
        for (r, (a, b)) in go.iter().zip(&gf).enumerate() {
            if mask[r] {
                g_orig.add_roi_delta_grad(r, a, scale);
                g_flip.add_roi_delta_grad(r, b, scale);
            }
        }
    }
    Ok(total)
}
