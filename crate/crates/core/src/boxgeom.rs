//! Axis-aligned box arithmetic.
//!
//! Boxes use the corner convention `(x1, y1, x2, y2)` in pixels with half-open
//! extent `[x1, x2) x [y1, y2)`, so a horizontal flip in an image of width `W`
//! maps `x` to `W - x` with no off-by-one correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest log-scale factor accepted when decoding, `ln(1000 / 16)`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting empty or non-finite extents.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clips to `[0, width) x [0, height)`. Returns `None` when nothing of the
    /// box remains inside the image.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// A scored, classified box. `class_id` never refers to the background slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Self {
        Detection {
            bbox,
            class_id,
            score,
        }
    }
}

/// A ground-truth (or pseudo) object: box plus foreground class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
}

impl Annotation {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        Annotation { bbox, class_id }
    }
}

/// Box regression parameterization: normalized center displacement and
/// log-scale width/height ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaVector {
    pub dcx: f64,
    pub dcy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl DeltaVector {
    pub const ZERO: DeltaVector = DeltaVector {
        dcx: 0.0,
        dcy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dcx: f64, dcy: f64, dw: f64, dh: f64) -> Self {
        DeltaVector { dcx, dcy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dcx, self.dcy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        DeltaVector::new(a[0], a[1], a[2], a[3])
    }
}

/// Intersection over union; 0 for disjoint or merely touching boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Mirrors a box about the vertical center line of an image of width `image_width`.
pub fn hflip_box(b: &BBox, image_width: f64) -> BBox {
    BBox {
        x1: image_width - b.x2,
        y1: b.y1,
        x2: image_width - b.x1,
        y2: b.y2,
    }
}

pub fn encode_deltas(anchor: &BBox, target: &BBox) -> DeltaVector {
    let (wa, ha) = (anchor.width(), anchor.height());
    let (cxa, cya) = anchor.center();
    let (cxt, cyt) = target.center();
    DeltaVector {
        dcx: (cxt - cxa) / wa,
        dcy: (cyt - cya) / ha,
        dw: (target.width() / wa).ln(),
        dh: (target.height() / ha).ln(),
    }
}

/// Inverse of [`encode_deltas`]. Scale deltas are capped at [`MAX_LOG_SCALE`]
/// so an untrained regressor cannot overflow.
pub fn decode_deltas(anchor: &BBox, d: &DeltaVector) -> BBox {
    let (wa, ha) = (anchor.width(), anchor.height());
    let (cxa, cya) = anchor.center();
    let cx = cxa + d.dcx * wa;
    let cy = cya + d.dcy * ha;
    let w = wa * d.dw.min(MAX_LOG_SCALE).exp();
    let h = ha * d.dh.min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// [`decode_deltas`] followed by clipping to the image; `None` if the result
/// collapses.
pub fn decode_deltas_clipped(
    anchor: &BBox,
    d: &DeltaVector,
    width: f64,
    height: f64,
) -> Option<BBox> {
    decode_deltas(anchor, d).clip(width, height)
}

/// Corrects a delta predicted on a horizontally flipped image back into the
/// frame of the original image: the center x displacement changes sign.
pub fn mirror_delta(d: &DeltaVector) -> DeltaVector {
    DeltaVector {
        dcx: -d.dcx,
        ..*d
    }
}

/// Total order used for NMS: score descending, then class ascending, then x1
/// ascending, then input position.
fn nms_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression. Returns the kept indices in keep order
/// (score descending). With `classwise`, only same-class detections suppress
/// each other.
pub fn nms(dets: &[Detection], iou_threshold: f64, classwise: bool) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in nms_order(dets) {
        let suppressed = kept.iter().any(|&k| {
            (!classwise || dets[k].class_id == dets[i].class_id)
                && iou(&dets[k].bbox, &dets[i].bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Sorts detections by descending score with the same tie-break as [`nms`].
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..80.0f64, 0.0..80.0f64, 1.0..40.0f64, 1.0..40.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        // inter 50, union 150
        let r = iou(&a, &bx(5.0, 0.0, 15.0, 10.0));
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 5.0, 5.0), &bx(5.0, 0.0, 9.0, 5.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn hflip_examples() {
        let b = bx(10.0, 20.0, 30.0, 40.0);
        assert_eq!(hflip_box(&b, 100.0), bx(70.0, 20.0, 90.0, 40.0));
        assert_eq!(hflip_box(&hflip_box(&b, 100.0), 100.0), b);
        let c = bx(45.0, 0.0, 55.0, 10.0);
        assert_eq!(hflip_box(&c, 100.0), c);
    }

    #[test]
    fn encode_decode_examples() {
        let anchor = bx(0.0, 0.0, 10.0, 10.0);
        let d = encode_deltas(&anchor, &bx(2.0, 2.0, 12.0, 12.0));
        assert!((d.dcx - 0.2).abs() < 1e-12 && (d.dcy - 0.2).abs() < 1e-12);
        assert_eq!((d.dw, d.dh), (0.0, 0.0));
        assert_eq!(encode_deltas(&anchor, &anchor), DeltaVector::ZERO);
        assert_eq!(decode_deltas(&anchor, &DeltaVector::ZERO), anchor);
        let back = decode_deltas(&anchor, &DeltaVector::new(0.2, 0.2, 0.0, 0.0));
        for (u, v) in [
            (back.x1, 2.0),
            (back.y1, 2.0),
            (back.x2, 12.0),
            (back.y2, 12.0),
        ] {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_clipped_to_image() {
        let anchor = bx(80.0, 80.0, 96.0, 96.0);
        let b = decode_deltas_clipped(&anchor, &DeltaVector::new(0.5, 0.5, 0.0, 0.0), 96.0, 96.0)
            .unwrap();
        assert_eq!((b.x2, b.y2), (96.0, 96.0));
        assert!(decode_deltas_clipped(&anchor, &DeltaVector::new(5.0, 0.0, 0.0, 0.0), 96.0, 96.0)
            .is_none());
    }

    #[test]
    fn mirror_examples() {
        let d = DeltaVector::new(0.2, 0.1, 0.3, -0.2);
        assert_eq!(mirror_delta(&d), DeltaVector::new(-0.2, 0.1, 0.3, -0.2));
        assert_eq!(mirror_delta(&mirror_delta(&d)), d);
    }

    #[test]
    fn nms_examples() {
        // IoU([0,0,10,10],[0,0,10,8]) = 0.8
        let a = Detection::new(bx(0.0, 0.0, 10.0, 10.0), 0, 0.9);
        let b = Detection::new(bx(0.0, 0.0, 10.0, 8.0), 0, 0.7);
        assert!((iou(&a.bbox, &b.bbox) - 0.8).abs() < 1e-12);
        assert_eq!(nms(&[a, b], 0.5, true), vec![0]);
        let b2 = Detection { class_id: 1, ..b };
        assert_eq!(nms(&[a, b2], 0.5, true), vec![0, 1]);
        assert_eq!(nms(&[a, b2], 0.5, false), vec![0]);
        assert!(nms(&[], 0.5, true).is_empty());
    }

    #[test]
    fn nms_tie_break_is_deterministic() {
        let a = Detection::new(bx(5.0, 0.0, 15.0, 10.0), 0, 0.5);
        let b = Detection::new(bx(4.0, 0.0, 14.0, 10.0), 0, 0.5);
        assert_eq!(nms(&[a, b], 0.5, true), vec![1]);
        assert_eq!(nms(&[b, a], 0.5, true), vec![0]);
    }

    proptest! {
        #[test]
        fn iou_bounds_and_symmetry(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn flip_and_mirror_involutions(b in arb_box(), w in 120.0..200.0f64,
                                       d in prop::array::uniform4(-2.0..2.0f64)) {
            let f = hflip_box(&hflip_box(&b, w), w);
            prop_assert!((f.x1 - b.x1).abs() < 1e-9 && (f.x2 - b.x2).abs() < 1e-9);
            let d = DeltaVector::from_array(d);
            prop_assert_eq!(mirror_delta(&mirror_delta(&d)), d);
        }

        #[test]
        fn encode_decode_round_trip(a in arb_box(), t in arb_box()) {
            let back = decode_deltas(&a, &encode_deltas(&a, &t));
            prop_assert!((back.x1 - t.x1).abs() < 1e-9);
            prop_assert!((back.y1 - t.y1).abs() < 1e-9);
            prop_assert!((back.x2 - t.x2).abs() < 1e-9);
            prop_assert!((back.y2 - t.y2).abs() < 1e-9);
        }

        #[test]
        fn flip_equivariance(a in arb_box(), t in arb_box()) {
            let w = 128.0;
            let flipped = encode_deltas(&hflip_box(&a, w), &hflip_box(&t, w));
            let mirrored = mirror_delta(&encode_deltas(&a, &t));
            for (u, v) in flipped.to_array().iter().zip(mirrored.to_array()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn nms_keeps_subset_in_score_order(
            boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..25)
        ) {
            let dets: Vec<Detection> =
                boxes.iter().map(|(b, s)| Detection::new(*b, 0, *s)).collect();
            let kept = nms(&dets, 0.5, true);
            prop_assert!(kept.iter().all(|&i| i < dets.len()));
            prop_assert!(kept.windows(2).all(|w| dets[w[0]].score >= dets[w[1]].score));
        }

        #[test]
        fn nms_distinct_classes_keeps_all(boxes in prop::collection::vec(arb_box(), 0..12)) {
            let dets: Vec<Detection> = boxes
                .iter()
                .enumerate()
                .map(|(i, b)| Detection::new(*b, i, 0.5))
                .collect();
            prop_assert_eq!(nms(&dets, 0.3, true).len(), dets.len());
        }
    }
}
