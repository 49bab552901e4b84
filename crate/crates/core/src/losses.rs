//! Scalar training objectives and their analytic gradients.
//!
//! Classification losses take a probability vector whose last entry is the
//! background class. Every log is taken of a probability clamped to
//! [`PROB_FLOOR`].

use serde::{Deserialize, Serialize};

use crate::boxgeom::DeltaVector;
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the pseudo-label (unsupervised) terms.
    pub lambda_unsup: f64,
    /// Weight of the flip-consistency localization term.
    pub lambda_con: f64,
    pub focal_gamma: f64,
    /// Candidates whose background probability reaches this value are masked
    /// out of the consistency loss.
    pub bg_mask_threshold: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_unsup: 2.0,
            lambda_con: 1.0,
            focal_gamma: 2.0,
            bg_mask_threshold: 0.9,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_unsup >= 0.0
            && self.lambda_con >= 0.0
            && self.focal_gamma >= 0.0
            && self.bg_mask_threshold > 0.0
            && self.bg_mask_threshold < 1.0
            && self.smooth_l1_beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// The four supervised detector terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SupervisedTerms {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

impl SupervisedTerms {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg
    }
}

/// Per-step loss components. Absent terms are zero; `total` is the weighted
/// objective that was optimized.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub con_loc: f64,
    pub unsup_rpn_cls: f64,
    pub unsup_roi_cls: f64,
    /// Pseudo-box regression, only non-zero when that ablation is enabled.
    pub unsup_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn supervised(&self) -> SupervisedTerms {
        SupervisedTerms {
            rpn_cls: self.rpn_cls,
            rpn_reg: self.rpn_reg,
            roi_cls: self.roi_cls,
            roi_reg: self.roi_reg,
        }
    }

    pub fn components(&self) -> [f64; 8] {
        [
            self.rpn_cls,
            self.rpn_reg,
            self.roi_cls,
            self.roi_reg,
            self.con_loc,
            self.unsup_rpn_cls,
            self.unsup_roi_cls,
            self.unsup_reg,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_FLOOR)
}

/// `-(1 - p_t)^gamma * ln(p_t)`.
pub fn focal_loss(class_probs: &[f64], target_class: usize, gamma: f64) -> f64 {
    let p = clamp_prob(class_probs[target_class]);
    -(1.0 - p).max(0.0).powf(gamma) * p.ln()
}

/// Gradient of [`focal_loss`] with respect to the probability vector.
pub fn focal_loss_grad(class_probs: &[f64], target_class: usize, gamma: f64) -> Vec<f64> {
    let mut g = vec![0.0; class_probs.len()];
    let raw = class_probs[target_class];
    if raw < PROB_FLOOR {
        return g;
    }
    let q = (1.0 - raw).max(0.0);
    let mut d = -q.powf(gamma) / raw;
    if gamma != 0.0 && q > 0.0 {
        d += gamma * q.powf(gamma - 1.0) * raw.ln();
    }
    g[target_class] = d;
    g
}

pub fn cross_entropy(probs: &[f64], target_class: usize) -> f64 {
    -clamp_prob(probs[target_class]).ln()
}

pub fn cross_entropy_grad(probs: &[f64], target_class: usize) -> Vec<f64> {
    let mut g = vec![0.0; probs.len()];
    let raw = probs[target_class];
    if raw >= PROB_FLOOR {
        g[target_class] = -1.0 / raw;
    }
    g
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Maps a gradient with respect to softmax outputs onto the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

#[inline]
fn smooth_l1_scalar(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

#[inline]
fn smooth_l1_scalar_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Smooth-L1 summed over the four delta components.
pub fn smooth_l1(pred: &DeltaVector, target: &DeltaVector, beta: f64) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| smooth_l1_scalar(p - t, beta))
        .sum()
}

/// Gradient of [`smooth_l1`] with respect to `pred`.
pub fn smooth_l1_grad(pred: &DeltaVector, target: &DeltaVector, beta: f64) -> DeltaVector {
    let p = pred.to_array();
    let t = target.to_array();
    DeltaVector::from_array(std::array::from_fn(|i| {
        smooth_l1_scalar_grad(p[i] - t[i], beta)
    }))
}

/// `true` marks a candidate that takes part in the consistency loss, i.e. its
/// background probability (last entry) is strictly below `tau_bg`.
pub fn background_mask<P: AsRef<[f64]>>(class_probs_per_candidate: &[P], tau_bg: f64) -> Vec<bool> {
    class_probs_per_candidate
        .iter()
        .map(|p| {
            let p = p.as_ref();
            p[p.len() - 1] < tau_bg
        })
        .collect()
}

#[inline]
fn consistency_residual(d: &DeltaVector, f: &DeltaVector) -> [f64; 4] {
    // The flipped prediction's center x displacement points the other way.
    [d.dcx + f.dcx, d.dcy - f.dcy, d.dw - f.dw, d.dh - f.dh]
}

fn check_consistency_lengths(orig: usize, flip: usize, mask: usize) -> Result<()> {
    if orig != flip {
        return Err(Error::LengthMismatch {
            what: "consistency deltas",
            left: orig,
            right: flip,
        });
    }
    if orig != mask {
        return Err(Error::LengthMismatch {
            what: "consistency mask",
            left: orig,
            right: mask,
        });
    }
    Ok(())
}

/// Flip-consistency localization loss: mean over unmasked index-wise pairs of
/// the quarter squared distance between the original deltas and the
/// mirror-corrected flipped deltas. Zero when no pair survives the mask.
pub fn consistency_loc_loss(
    deltas_orig: &[DeltaVector],
    deltas_flip: &[DeltaVector],
    mask: &[bool],
) -> Result<f64> {
    check_consistency_lengths(deltas_orig.len(), deltas_flip.len(), mask.len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((d, f), &keep) in deltas_orig.iter().zip(deltas_flip).zip(mask) {
        if keep {
            sum += 0.25 * consistency_residual(d, f).iter().map(|r| r * r).sum::<f64>();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Gradients of [`consistency_loc_loss`] with respect to both delta lists.
pub fn consistency_loc_grad(
    deltas_orig: &[DeltaVector],
    deltas_flip: &[DeltaVector],
    mask: &[bool],
) -> Result<(Vec<DeltaVector>, Vec<DeltaVector>)> {
    check_consistency_lengths(deltas_orig.len(), deltas_flip.len(), mask.len())?;
    let n = mask.iter().filter(|&&m| m).count();
    let mut g_orig = vec![DeltaVector::ZERO; deltas_orig.len()];
    let mut g_flip = vec![DeltaVector::ZERO; deltas_flip.len()];
    if n == 0 {
        return Ok((g_orig, g_flip));
    }
    let scale = 0.5 / n as f64;
    for (i, (d, f)) in deltas_orig.iter().zip(deltas_flip).enumerate() {
        if !mask[i] {
            continue;
        }
        let r = consistency_residual(d, f);
        g_orig[i] = DeltaVector::new(scale * r[0], scale * r[1], scale * r[2], scale * r[3]);
        g_flip[i] = DeltaVector::new(scale * r[0], -scale * r[1], -scale * r[2], -scale * r[3]);
    }
    Ok((g_orig, g_flip))
}

/// Burn-in objective: the four supervised terms plus the weighted consistency
/// localization term.
pub fn burn_in_total(sup: SupervisedTerms, con_loc: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        rpn_cls: sup.rpn_cls,
        rpn_reg: sup.rpn_reg,
        roi_cls: sup.roi_cls,
        roi_reg: sup.roi_reg,
        con_loc,
        total: sup.total() + weights.lambda_con * con_loc,
        ..LossBreakdown::default()
    }
}

/// Pseudo-label loss terms of a mutual-learning step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UnsupervisedTerms {
    pub rpn_cls: f64,
    pub roi_cls: f64,
    pub reg: f64,
}

/// Mutual-learning objective: supervised total plus weighted pseudo-label and
/// consistency terms.
pub fn mutual_total(
    sup: SupervisedTerms,
    unsup: UnsupervisedTerms,
    con_loc: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        rpn_cls: sup.rpn_cls,
        rpn_reg: sup.rpn_reg,
        roi_cls: sup.roi_cls,
        roi_reg: sup.roi_reg,
        con_loc,
        unsup_rpn_cls: unsup.rpn_cls,
        unsup_roi_cls: unsup.roi_cls,
        unsup_reg: unsup.reg,
        total: sup.total()
            + weights.lambda_unsup * (unsup.rpn_cls + unsup.roi_cls + unsup.reg)
            + weights.lambda_con * con_loc,
    }
}
