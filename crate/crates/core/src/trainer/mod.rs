//! Two-stage training: supervised burn-in with flip consistency, then
//! teacher-student mutual learning on pseudo-labels with an EMA teacher.

mod objective;
mod run;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{Annotation, BBox};
use crate::data::{flip_decision, strong_augment, weak_augment, AnnotatedImage, AugmentationConfig};
use crate::detector::{
    anchor_mirror_permutation, forward, forward_train, mirror_permutation_holds, ArchConfig,
    DetectorOutputs, DetectorParams, ForwardPass, OutputGrads, RoiSource,
};
use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::losses::{burn_in_total, mutual_total, LossBreakdown, LossWeights, SupervisedTerms, UnsupervisedTerms};
use crate::pseudolabel::{pseudo_label_stats, pseudo_labels_from_outputs, PseudoLabelSet, PseudoLabelStats};
use crate::rng::{derive_seed, stream_rng};

use objective::{
    consistency_terms, mirrored_rois, roi_terms, rpn_terms, supervised_terms, ConsistencyLevels,
    RoiClassLoss, TargetSettings,
};

pub use run::{
    latest_checkpoint, load_checkpoint, read_metrics, save_checkpoint, train, EvalSummary,
    MetricsRecord, TrainOptions, TrainOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub labeled_fraction: f64,
    /// Seed of the labeled/unlabeled split; the run seed when absent.
    pub split_seed: Option<u64>,
    pub burn_in_iterations: u64,
    pub total_iterations: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; none when absent.
    pub grad_clip_norm: Option<f64>,
    pub ema_alpha: f64,
    /// Pseudo-label confidence threshold.
    pub delta: f64,
    pub pseudo_nms_threshold: f64,
    pub loss: LossWeights,
    pub rpn_batch_per_image: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_iou_positive: f64,
    pub rpn_iou_negative: f64,
    pub roi_iou_foreground: f64,
    pub disable_con_loc: bool,
    pub disable_focal: bool,
    pub disable_mutual: bool,
    pub con_loc_labeled: bool,
    pub con_loc_unlabeled: bool,
    pub con_loc_rpn: bool,
    pub con_loc_roi: bool,
    /// Also regress boxes toward pseudo-labels.
    pub unsup_regression: bool,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    /// Evaluate on the first N test images only.
    pub eval_max_images: Option<usize>,
    pub dump_pseudo_labels: bool,
    pub arch: ArchConfig,
    pub augmentation: AugmentationConfig,
    pub eval: EvalSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            labeled_fraction: 0.05,
            split_seed: None,
            burn_in_iterations: 1000,
            total_iterations: 5000,
            batch_labeled: 8,
            batch_unlabeled: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip_norm: Some(10.0),
            ema_alpha: 0.99,
            delta: 0.7,
            pseudo_nms_threshold: 0.5,
            loss: LossWeights::default(),
            rpn_batch_per_image: 128,
            rpn_positive_fraction: 0.5,
            rpn_iou_positive: 0.7,
            rpn_iou_negative: 0.3,
            roi_iou_foreground: 0.5,
            disable_con_loc: false,
            disable_focal: false,
            disable_mutual: false,
            con_loc_labeled: true,
            con_loc_unlabeled: true,
            con_loc_rpn: true,
            con_loc_roi: true,
            unsup_regression: false,
            log_interval: 10,
            eval_interval: 500,
            checkpoint_interval: 1000,
            eval_max_images: None,
            dump_pseudo_labels: true,
            arch: ArchConfig::default(),
            augmentation: AugmentationConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.burn_in_iterations > self.total_iterations {
            return bad(format!(
                "burn_in_iterations {} exceeds total_iterations {}",
                self.burn_in_iterations, self.total_iterations
            ));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {} outside [0, 1)", self.ema_alpha));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta {} outside (0, 1]", self.delta));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction < 1.0) {
            return bad(format!("labeled_fraction {} outside (0, 1)", self.labeled_fraction));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 || self.rpn_batch_per_image == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("invalid optimizer settings".into());
        }
        if !(0.0..=1.0).contains(&self.rpn_positive_fraction)
            || !(0.0 < self.rpn_iou_negative && self.rpn_iou_negative <= self.rpn_iou_positive && self.rpn_iou_positive <= 1.0)
            || !(0.0 < self.roi_iou_foreground && self.roi_iou_foreground <= 1.0)
        {
            return bad("invalid target-assignment thresholds".into());
        }
        if self.log_interval == 0 || self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return bad("intervals must be positive".into());
        }
        self.loss.validate()?;
        self.arch.validate()?;
        self.augmentation.validate()?;
        if !mirror_permutation_holds(&self.arch) {
            return bad("anchor grid is not mirror-symmetric".into());
        }
        Ok(())
    }

    fn targets(&self) -> TargetSettings {
        TargetSettings {
            rpn_iou_pos: self.rpn_iou_positive,
            rpn_iou_neg: self.rpn_iou_negative,
            rpn_batch: self.rpn_batch_per_image,
            rpn_positive_fraction: self.rpn_positive_fraction,
            roi_iou_fg: self.roi_iou_foreground,
            beta: self.loss.smooth_l1_beta,
        }
    }

    fn levels(&self) -> ConsistencyLevels {
        ConsistencyLevels {
            rpn: self.con_loc_rpn,
            roi: self.con_loc_roi,
        }
    }

    fn con_labeled(&self) -> bool {
        !self.disable_con_loc && self.con_loc_labeled && (self.con_loc_rpn || self.con_loc_roi)
    }

    fn con_unlabeled(&self) -> bool {
        !self.disable_con_loc && self.con_loc_unlabeled && (self.con_loc_rpn || self.con_loc_roi)
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BurnIn,
    Mutual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub stage: Stage,
    pub student: DetectorParams,
    pub teacher: Option<DetectorParams>,
    /// Momentum buffers, one per student tensor.
    pub momentum: DetectorParams,
    /// Every random draw derives from this seed and the iteration index.
    pub seed: u64,
}

impl TrainState {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let student = DetectorParams::init(arch, derive_seed(seed, "init", &[]))?;
        let momentum = student.zeros_like();
        Ok(TrainState {
            iteration: 0,
            stage: Stage::BurnIn,
            student,
            teacher: None,
            momentum,
            seed,
        })
    }

    pub fn check_invariants(&self) -> Result<()> {
        match (self.stage, &self.teacher) {
            (Stage::BurnIn, Some(_)) => return Err(Error::State("teacher present during burn-in".into())),
            (Stage::Mutual, None) => return Err(Error::State("mutual stage without a teacher".into())),
            (_, Some(t)) => t.check_same_structure(&self.student)?,
            _ => {}
        }
        self.momentum.check_same_structure(&self.student)
    }
}

/// Copies the student into a fresh teacher and enters the mutual stage.
pub fn init_teacher(state: &mut TrainState) -> Result<()> {
    if state.stage != Stage::BurnIn || state.teacher.is_some() {
        return Err(Error::State("teacher already initialized".into()));
    }
    state.teacher = Some(state.student.clone());
    state.stage = Stage::Mutual;
    Ok(())
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, element-wise.
pub fn ema_update(teacher: &mut DetectorParams, student: &DetectorParams, alpha: f64) -> Result<()> {
    teacher.check_same_structure(student)?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("ema alpha {alpha} outside [0, 1)")));
    }
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (a, &b) in t.data.iter_mut().zip(&s.data) {
            *a = (alpha * *a as f64 + (1.0 - alpha) * b as f64) as f32;
        }
    }
    Ok(())
}

/// Momentum SGD with decoupled-from-loss L2 decay and optional norm clipping.
fn sgd_step(state: &mut TrainState, grads: &DetectorParams, cfg: &TrainConfig) -> Result<f64> {
    state.momentum.check_same_structure(&state.student)?;
    let norm = grads
        .tensors
        .iter()
        .flat_map(|t| &t.data)
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    let clip = match cfg.grad_clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let (lr, mu, wd) = (cfg.learning_rate as f32, cfg.momentum as f32, cfg.weight_decay as f32);
    let clip = clip as f32;
    for ((p, v), g) in state
        .student
        .tensors
        .iter_mut()
        .zip(state.momentum.tensors.iter_mut())
        .zip(&grads.tensors)
    {
        let decay = if p.name.ends_with(".bias") { 0.0 } else { wd };
        for ((w, m), &d) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
            *m = mu * *m + clip * d + decay * *w;
            *w -= lr * *m;
        }
    }
    Ok(norm)
}

fn boxes(anns: &[Annotation]) -> Vec<BBox> {
    anns.iter().map(|a| a.bbox).collect()
}

/// Pass on the mirrored image with mirrored ROIs, plus the consistency value
/// and gradients for both passes.
fn consistency_pair(
    params: &DetectorParams,
    pixels: &crate::pixels::Image,
    orig: &DetectorOutputs,
    perm: &[usize],
    cfg: &TrainConfig,
    g_orig: &mut OutputGrads,
    scale: f64,
) -> Result<(f64, ForwardPass, OutputGrads)> {
    let rois = mirrored_rois(orig, pixels.width as f64);
    let fpass = forward_train(params, &pixels.hflip(), RoiSource::Override(&rois))?;
    let mut g_flip = OutputGrads::zeros(&fpass.outputs);
    let v = consistency_terms(
        orig,
        &fpass.outputs,
        perm,
        cfg.loss.bg_mask_threshold,
        cfg.levels(),
        g_orig,
        &mut g_flip,
        scale,
    )?;
    Ok((v, fpass, g_flip))
}

/// Supervised terms and labeled consistency over a batch, accumulating the
/// gradient of their batch mean into `acc`. Returns `(terms, con_loc)`.
fn labeled_pass(
    state: &TrainState,
    cfg: &TrainConfig,
    batch: &[&AnnotatedImage],
    acc: &mut DetectorParams,
) -> Result<(SupervisedTerms, f64)> {
    let perm = anchor_mirror_permutation(&cfg.arch);
    let scale = 1.0 / batch.len() as f64;
    let mut sum = SupervisedTerms::default();
    let mut con = 0.0;
    for (slot, img) in batch.iter().enumerate() {
        let gt = boxes(&img.annotations);
        let pass = forward_train(&state.student, &img.pixels, RoiSource::RpnWithExtra(&gt))?;
        let mut g = OutputGrads::zeros(&pass.outputs);
        let mut rng = stream_rng(state.seed, "labeled-rpn-sample", &[state.iteration, slot as u64]);
        let t = supervised_terms(&pass.outputs, &img.annotations, &cfg.targets(), &mut rng, &mut g, scale);
        sum.rpn_cls += t.rpn_cls * scale;
        sum.rpn_reg += t.rpn_reg * scale;
        sum.roi_cls += t.roi_cls * scale;
        sum.roi_reg += t.roi_reg * scale;
        if cfg.con_labeled() {
            let w = scale * cfg.loss.lambda_con;
            let (v, fpass, gf) = consistency_pair(&state.student, &img.pixels, &pass.outputs, &perm, cfg, &mut g, w)?;
            con += v * scale;
            fpass.backward(&state.student, &gf, acc);
        }
        pass.backward(&state.student, &g, acc);
    }
    Ok((sum, con))
}

fn check_finite(iteration: u64, loss: &LossBreakdown, grads: &DetectorParams) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            detail: format!("{loss:?}"),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            detail: "non-finite gradient".into(),
        });
    }
    Ok(())
}

/// One supervised step on a labeled batch.
pub fn burn_in_step(state: &mut TrainState, cfg: &TrainConfig, batch: &[&AnnotatedImage]) -> Result<LossBreakdown> {
    if state.stage != Stage::BurnIn {
        return Err(Error::State("burn-in step outside the burn-in stage".into()));
    }
    if batch.is_empty() {
        return Err(Error::Empty("labeled batch"));
    }
    let mut grads = state.student.zeros_like();
    let (sup, con) = labeled_pass(state, cfg, batch, &mut grads)?;
    let loss = burn_in_total(sup, con, &cfg.loss);
    check_finite(state.iteration, &loss, &grads)?;
    sgd_step(state, &grads, cfg)?;
    state.iteration += 1;
    Ok(loss)
}

/// Seeds of one unlabeled image's weak flip and strong augmentation.
fn unlabeled_seeds(seed: u64, iteration: u64, slot: usize) -> (u64, u64) {
    (
        derive_seed(seed, "weak", &[iteration, slot as u64]),
        derive_seed(seed, "strong", &[iteration, slot as u64]),
    )
}

/// Student views of an unlabeled image: the weak view (shared with the
/// teacher) and the strong view built on top of it.
pub fn unlabeled_views(
    img: &AnnotatedImage,
    cfg: &TrainConfig,
    seed: u64,
    iteration: u64,
    slot: usize,
) -> (AnnotatedImage, crate::pixels::Image) {
    let (ws, ss) = unlabeled_seeds(seed, iteration, slot);
    let flip = flip_decision(ws, cfg.augmentation.flip_prob);
    let weak = weak_augment(img, ws, Some(flip), cfg.augmentation.flip_prob);
    let strong = strong_augment(&weak.pixels, ss, &cfg.augmentation);
    (weak, strong)
}

/// Pseudo-label classification terms (and optional regression) of one
/// student pass. Returns the unweighted per-image terms.
pub fn unsupervised_terms(
    out: &DetectorOutputs,
    pseudo: &[Annotation],
    cfg: &TrainConfig,
    rng: &mut impl rand::Rng,
    grads: &mut OutputGrads,
    scale: f64,
) -> UnsupervisedTerms {
    if pseudo.is_empty() {
        return UnsupervisedTerms::default();
    }
    let kind = if cfg.disable_focal {
        RoiClassLoss::CrossEntropy
    } else {
        RoiClassLoss::Focal(cfg.loss.focal_gamma)
    };
    let s = cfg.targets();
    let (rpn_cls, rpn_reg) = rpn_terms(out, pseudo, &s, rng, cfg.unsup_regression, grads, scale);
    let (roi_cls, roi_reg) = roi_terms(out, pseudo, &s, kind, cfg.unsup_regression, grads, scale);
    UnsupervisedTerms {
        rpn_cls,
        roi_cls,
        reg: rpn_reg + roi_reg,
    }
}

/// What one mutual step produced besides the parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct MutualStepReport {
    pub loss: LossBreakdown,
    pub pseudo_labels: Vec<PseudoLabelSet>,
    /// Pseudo-label quality against the withheld annotations.
    pub pseudo_stats: PseudoLabelStats,
}

/// One mutual-learning step: supervised terms on `labeled`, pseudo-label terms
/// and consistency on `unlabeled`, an SGD update of the student, then the EMA
/// update of the teacher.
pub fn mutual_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    labeled: &[&AnnotatedImage],
    unlabeled: &[&AnnotatedImage],
) -> Result<MutualStepReport> {
    if state.stage != Stage::Mutual {
        return Err(Error::State("mutual step outside the mutual stage".into()));
    }
    state.check_invariants()?;
    if labeled.is_empty() {
        return Err(Error::Empty("labeled batch"));
    }
    let mut grads = state.student.zeros_like();
    let (sup, con_l) = labeled_pass(state, cfg, labeled, &mut grads)?;
    let num_classes = cfg.arch.num_classes;

    if cfg.disable_mutual {
        let loss = burn_in_total(sup, con_l, &cfg.loss);
        check_finite(state.iteration, &loss, &grads)?;
        sgd_step(state, &grads, cfg)?;
        state.iteration += 1;
        return Ok(MutualStepReport {
            loss,
            pseudo_labels: Vec::new(),
            pseudo_stats: PseudoLabelStats::merge(&[], num_classes),
        });
    }
    if unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled batch"));
    }

    let teacher = state.teacher.as_ref().expect("checked by invariants");
    let perm = anchor_mirror_permutation(&cfg.arch);
    let scale = 1.0 / unlabeled.len() as f64;
    let size = cfg.arch.image_size as f64;
    let mut unsup = UnsupervisedTerms::default();
    let mut con_u = 0.0;
    let mut sets = Vec::with_capacity(unlabeled.len());
    let mut stats = Vec::with_capacity(unlabeled.len());
    for (slot, img) in unlabeled.iter().enumerate() {
        let (weak, strong) = unlabeled_views(img, cfg, state.seed, state.iteration, slot);
        let t_out = forward(teacher, &weak.pixels, RoiSource::Rpn)?;
        let pls = pseudo_labels_from_outputs(
            &t_out,
            size,
            &img.image_id,
            cfg.delta,
            cfg.pseudo_nms_threshold,
            state.iteration,
        );
        stats.push(pseudo_label_stats(&pls, &weak.annotations, 0.5, num_classes));
        let pseudo = pls.annotations();
        sets.push(pls);
        if pseudo.is_empty() && !cfg.con_unlabeled() {
            continue;
        }
        let pboxes = boxes(&pseudo);
        let source = if pseudo.is_empty() {
            RoiSource::Rpn
        } else {
            RoiSource::RpnWithExtra(&pboxes)
        };
        let pass = forward_train(&state.student, &strong, source)?;
        let mut g = OutputGrads::zeros(&pass.outputs);
        let mut rng = stream_rng(state.seed, "unlabeled-rpn-sample", &[state.iteration, slot as u64]);
        let u = unsupervised_terms(&pass.outputs, &pseudo, cfg, &mut rng, &mut g, scale * cfg.loss.lambda_unsup);
        unsup.rpn_cls += u.rpn_cls * scale;
        unsup.roi_cls += u.roi_cls * scale;
        unsup.reg += u.reg * scale;
        if cfg.con_unlabeled() {
            let w = scale * cfg.loss.lambda_con;
            let (v, fpass, gf) = consistency_pair(&state.student, &strong, &pass.outputs, &perm, cfg, &mut g, w)?;
            con_u += v * scale;
            fpass.backward(&state.student, &gf, &mut grads);
        }
        pass.backward(&state.student, &g, &mut grads);
    }

    let loss = mutual_total(sup, unsup, con_l + con_u, &cfg.loss);
    check_finite(state.iteration, &loss, &grads)?;
    sgd_step(state, &grads, cfg)?;
    let teacher = state.teacher.as_mut().expect("checked by invariants");
    ema_update(teacher, &state.student, cfg.ema_alpha)?;
    state.iteration += 1;
    Ok(MutualStepReport {
        loss,
        pseudo_labels: sets,
        pseudo_stats: PseudoLabelStats::merge(&stats, num_classes),
    })
}
