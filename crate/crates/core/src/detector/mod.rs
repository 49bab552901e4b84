//! A miniature two-stage detector: convolutional backbone, region proposal
//! network over an anchor grid, and a region-of-interest head with a
//! classifier over `C + 1` classes (background last) and class-agnostic box
//! regression.

mod model;
mod params;
mod targets;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{hflip_box, BBox};
use crate::error::{Error, Result};

pub use model::{detect, forward, forward_train, DetectorOutputs, ForwardPass, OutputGrads, RoiSource};
pub use params::{DetectorParams, Tensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use targets::{
    assign_anchor_targets, assign_roi_targets, Assigned, TargetAssignment,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Foreground classes; the classifier has one more output for background.
    pub num_classes: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub rpn_channels: usize,
    /// Anchor side lengths (square-root of area) in pixels.
    pub anchor_sizes: Vec<f64>,
    /// Anchor height / width ratios.
    pub anchor_ratios: Vec<f64>,
    pub roi_pool_size: usize,
    /// Bilinear samples per pooling bin along each axis.
    pub roi_sampling: usize,
    pub roi_hidden: usize,
    pub rpn_pre_nms_top_n: usize,
    pub rpn_post_nms_top_n: usize,
    pub rpn_nms_threshold: f64,
    pub min_proposal_size: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 96,
            num_classes: 3,
            backbone_channels: vec![16, 24, 32, 32],
            backbone_strides: vec![2, 2, 2, 1],
            rpn_channels: 32,
            anchor_sizes: vec![14.0, 24.0, 40.0],
            anchor_ratios: vec![0.75, 1.333_333_333_333_333_3],
            roi_pool_size: 4,
            roi_sampling: 2,
            roi_hidden: 96,
            rpn_pre_nms_top_n: 200,
            rpn_post_nms_top_n: 64,
            rpn_nms_threshold: 0.7,
            min_proposal_size: 2.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("arch: {m}")));
        if self.num_classes == 0 {
            return fail("num_classes must be positive");
        }
        if self.backbone_channels.is_empty()
            || self.backbone_channels.len() != self.backbone_strides.len()
            || self.backbone_channels.contains(&0)
            || self.backbone_strides.contains(&0)
        {
            return fail("backbone channels/strides must be non-empty, equal length, positive");
        }
        let stride = self.feature_stride();
        if self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return fail("image_size must be a positive multiple of the feature stride");
        }
        if self.anchor_sizes.is_empty()
            || self.anchor_ratios.is_empty()
            || self
                .anchor_sizes
                .iter()
                .chain(&self.anchor_ratios)
                .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return fail("anchor sizes and ratios must be positive");
        }
        if self.rpn_channels == 0
            || self.roi_pool_size == 0
            || self.roi_sampling == 0
            || self.roi_hidden == 0
            || self.rpn_post_nms_top_n == 0
        {
            return fail("layer widths must be positive");
        }
        if !(self.rpn_nms_threshold > 0.0 && self.rpn_nms_threshold < 1.0) {
            return fail("rpn_nms_threshold must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn feature_stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / self.feature_stride()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated non-empty")
    }

    pub fn anchors_per_location(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    pub fn num_anchors(&self) -> usize {
        let f = self.feature_size();
        f * f * self.anchors_per_location()
    }
}

/// Anchor boxes ordered by `(row, column, shape)` of the feature grid.
pub fn anchors(arch: &ArchConfig) -> Vec<BBox> {
    let f = arch.feature_size();
    let stride = arch.feature_stride() as f64;
    let mut shapes = Vec::with_capacity(arch.anchors_per_location());
    for &size in &arch.anchor_sizes {
        for &ratio in &arch.anchor_ratios {
            let r = ratio.sqrt();
            shapes.push((size / r, size * r));
        }
    }
    let mut out = Vec::with_capacity(arch.num_anchors());
    for y in 0..f {
        for x in 0..f {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            for &(w, h) in &shapes {
                out.push(BBox::from_center(cx, cy, w, h));
            }
        }
    }
    out
}

/// `perm[k]` is the anchor that anchor `k` becomes under a horizontal flip of
/// the image: same row and shape, mirrored column.
pub fn anchor_mirror_permutation(arch: &ArchConfig) -> Vec<usize> {
    let f = arch.feature_size();
    let a = arch.anchors_per_location();
    let mut perm = Vec::with_capacity(arch.num_anchors());
    for y in 0..f {
        for x in 0..f {
            for s in 0..a {
                perm.push((y * f + (f - 1 - x)) * a + s);
            }
        }
    }
    perm
}

/// Checks that flipping every anchor lands exactly on its permuted partner.
pub fn mirror_permutation_holds(arch: &ArchConfig) -> bool {
    let anchors = anchors(arch);
    let w = arch.image_size as f64;
    anchor_mirror_permutation(arch)
        .iter()
        .enumerate()
        .all(|(k, &m)| {
            let f = hflip_box(&anchors[k], w);
            let g = anchors[m];
            (f.x1 - g.x1).abs() < 1e-9
                && (f.x2 - g.x2).abs() < 1e-9
                && f.y1 == g.y1
                && f.y2 == g.y2
        })
}
