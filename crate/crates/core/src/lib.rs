//! Semi-supervised two-stage object detection.
//!
//! Training runs in two stages. Burn-in fits a small Faster R-CNN style
//! detector on the labeled images, adding a flip-consistency localization
//! loss. Mutual learning then trains a student on teacher pseudo-labels from
//! unlabeled images, with focal loss on the ROI classifier. The teacher is an
//! exponential moving average of the student. The crate also ships a synthetic
//! shapes dataset, the augmentation pipelines, a COCO-style evaluator, and
//! the experiment harness that ties them together.

pub mod boxgeom;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod pixels;
pub mod pseudolabel;
pub mod rng;
pub mod trainer;

pub use boxgeom::{Annotation, BBox, DeltaVector, Detection};
pub use detector::{ArchConfig, DetectorParams};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights};
pub use pixels::Image;
