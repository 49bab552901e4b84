use super::params::slot;
use super::{anchors, ArchConfig, DetectorParams};
use crate::boxgeom::{decode_deltas_clipped, nms, BBox, DeltaVector, Detection};
use crate::error::{Error, Result};
use crate::losses::{softmax, softmax_backward};
use crate::nn::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, relu_backward_inplace,
    relu_inplace, roi_pool_backward, roi_pool_forward, ConvCache, ConvShape, RoiPoolCache,
};
use crate::pixels::Image;

/// Where the ROI head takes its regions from.
#[derive(Debug, Clone, Copy)]
pub enum RoiSource<'a> {
    /// RPN proposals only (inference).
    Rpn,
    /// RPN proposals followed by extra boxes (ground truth or pseudo-labels
    /// during training).
    RpnWithExtra(&'a [BBox]),
    /// Exactly these boxes, in this order; the RPN still runs but its
    /// proposals are not used.
    Override(&'a [BBox]),
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct DetectorOutputs {
    pub anchors: Vec<BBox>,
    pub rpn_logits: Vec<f64>,
    /// Foreground probability per anchor.
    pub rpn_objectness: Vec<f64>,
    pub rpn_deltas: Vec<DeltaVector>,
    /// Boxes fed to the ROI head, in ROI order.
    pub proposals: Vec<BBox>,
    /// RPN objectness of each proposal; `None` for boxes that did not come
    /// from the RPN.
    pub proposal_objectness: Vec<Option<f64>>,
    /// `C + 1` probabilities per proposal, background last.
    pub roi_class_probs: Vec<Vec<f64>>,
    pub roi_deltas: Vec<DeltaVector>,
}

impl DetectorOutputs {
    /// Anchor probability vector `[foreground, background]`.
    pub fn rpn_probs(&self, k: usize) -> [f64; 2] {
        let p = self.rpn_objectness[k];
        [p, 1.0 - p]
    }

    pub fn num_classes(&self) -> usize {
        self.roi_class_probs
            .first()
            .map_or(0, |p| p.len().saturating_sub(1))
    }
}

/// Gradients of a scalar objective with respect to the raw detector outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub rpn_logits: Vec<f64>,
    pub rpn_deltas: Vec<[f64; 4]>,
    /// Row-major `[roi][class]` logit gradients.
    pub roi_logits: Vec<f64>,
    pub roi_deltas: Vec<[f64; 4]>,
    classes: usize,
}

impl OutputGrads {
    pub fn zeros(out: &DetectorOutputs) -> Self {
        let classes = out.roi_class_probs.first().map_or(0, Vec::len);
        OutputGrads {
            rpn_logits: vec![0.0; out.rpn_logits.len()],
            rpn_deltas: vec![[0.0; 4]; out.rpn_deltas.len()],
            roi_logits: vec![0.0; out.roi_class_probs.len() * classes],
            roi_deltas: vec![[0.0; 4]; out.roi_deltas.len()],
            classes,
        }
    }

    /// Adds `scale * g`, where `g` is a gradient with respect to the anchor's
    /// `[foreground, background]` probabilities.
    pub fn add_rpn_prob_grad(&mut self, out: &DetectorOutputs, k: usize, g: &[f64], scale: f64) {
        let p = out.rpn_objectness[k];
        self.rpn_logits[k] += scale * (g[0] - g[1]) * p * (1.0 - p);
    }

    /// Adds `scale * g`, where `g` is a gradient with respect to the ROI's class
    /// probabilities.
    pub fn add_roi_prob_grad(&mut self, out: &DetectorOutputs, r: usize, g: &[f64], scale: f64) {
        let dz = softmax_backward(&out.roi_class_probs[r], g);
        let row = &mut self.roi_logits[r * self.classes..(r + 1) * self.classes];
        for (acc, v) in row.iter_mut().zip(dz) {
            *acc += scale * v;
        }
    }

    pub fn add_rpn_delta_grad(&mut self, k: usize, g: &DeltaVector, scale: f64) {
        for (acc, v) in self.rpn_deltas[k].iter_mut().zip(g.to_array()) {
            *acc += scale * v;
        }
    }

    pub fn add_roi_delta_grad(&mut self, r: usize, g: &DeltaVector, scale: f64) {
        for (acc, v) in self.roi_deltas[r].iter_mut().zip(g.to_array()) {
            *acc += scale * v;
        }
    }
}

#[derive(Debug, Clone)]
struct Cache {
    /// Per backbone layer: convolution cache and post-ReLU output.
    backbone: Vec<(ConvCache, Vec<f32>)>,
    rpn_conv: ConvCache,
    rpn_hidden: Vec<f32>,
    rpn_obj: ConvCache,
    rpn_del: ConvCache,
    roi_pool: RoiPoolCache,
    roi_x: Vec<f32>,
    roi_hidden: Vec<f32>,
}

/// A forward pass that retains what backpropagation needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub outputs: DetectorOutputs,
    cache: Cache,
}

fn check_image(arch: &ArchConfig, image: &Image) -> Result<()> {
    if image.channels != 3 || image.height != arch.image_size || image.width != arch.image_size {
        return Err(Error::Config(format!(
            "image is {}x{}x{}, detector expects 3x{s}x{s}",
            image.channels,
            image.height,
            image.width,
            s = arch.image_size
        )));
    }
    Ok(())
}

/// Decodes, clips and suppresses anchor predictions into at most
/// `rpn_post_nms_top_n` proposals.
fn rpn_proposals(
    arch: &ArchConfig,
    anchors: &[BBox],
    logits: &[f64],
    objectness: &[f64],
    deltas: &[DeltaVector],
) -> (Vec<BBox>, Vec<Option<f64>>) {
    let size = arch.image_size as f64;
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut cands = Vec::with_capacity(arch.rpn_pre_nms_top_n);
    for k in order {
        if cands.len() >= arch.rpn_pre_nms_top_n {
            break;
        }
        if let Some(b) = decode_deltas_clipped(&anchors[k], &deltas[k], size, size) {
            if b.width() >= arch.min_proposal_size && b.height() >= arch.min_proposal_size {
                cands.push(Detection::new(b, 0, objectness[k]));
            }
        }
    }
    let keep = nms(&cands, arch.rpn_nms_threshold, false);
    keep.into_iter()
        .take(arch.rpn_post_nms_top_n)
        .map(|i| (cands[i].bbox, Some(cands[i].score)))
        .unzip()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn run(params: &DetectorParams, image: &Image, source: RoiSource<'_>) -> Result<ForwardPass> {
    let arch = &params.arch;
    check_image(arch, image)?;
    let t = &params.tensors;
    let heads = slot::heads(arch.backbone_channels.len());

    let mut x = image.data.clone();
    let (mut cin, mut h) = (3usize, arch.image_size);
    let mut backbone = Vec::with_capacity(arch.backbone_channels.len());
    for (i, (&cout, &stride)) in arch
        .backbone_channels
        .iter()
        .zip(&arch.backbone_strides)
        .enumerate()
    {
        let shape = ConvShape {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride,
            in_h: h,
            in_w: h,
        };
        let (mut y, cache) = conv2d_forward(
            shape,
            &x,
            &t[slot::backbone_weight(i)].data,
            &t[slot::backbone_bias(i)].data,
        );
        relu_inplace(&mut y);
        h = shape.out_h();
        cin = cout;
        backbone.push((cache, y.clone()));
        x = y;
    }
    let features = x;
    let fsz = h;
    let fch = cin;

    let rpn_shape = ConvShape {
        in_channels: fch,
        out_channels: arch.rpn_channels,
        kernel: 3,
        stride: 1,
        in_h: fsz,
        in_w: fsz,
    };
    let (mut rpn_hidden, rpn_conv) = conv2d_forward(
        rpn_shape,
        &features,
        &t[heads.rpn_conv_w].data,
        &t[heads.rpn_conv_b].data,
    );
    relu_inplace(&mut rpn_hidden);
    let a = arch.anchors_per_location();
    let point = |out: usize| ConvShape {
        in_channels: arch.rpn_channels,
        out_channels: out,
        kernel: 1,
        stride: 1,
        in_h: fsz,
        in_w: fsz,
    };
    let (obj, rpn_obj) = conv2d_forward(
        point(a),
        &rpn_hidden,
        &t[heads.rpn_obj_w].data,
        &t[heads.rpn_obj_b].data,
    );
    let (del, rpn_del) = conv2d_forward(
        point(4 * a),
        &rpn_hidden,
        &t[heads.rpn_del_w].data,
        &t[heads.rpn_del_b].data,
    );

    let plane = fsz * fsz;
    let n_anchors = plane * a;
    let mut rpn_logits = Vec::with_capacity(n_anchors);
    let mut rpn_deltas = Vec::with_capacity(n_anchors);
    for pos in 0..plane {
        for s in 0..a {
            rpn_logits.push(obj[s * plane + pos] as f64);
            let c = |j: usize| del[(4 * s + j) * plane + pos] as f64;
            rpn_deltas.push(DeltaVector::new(c(0), c(1), c(2), c(3)));
        }
    }
    let rpn_objectness: Vec<f64> = rpn_logits.iter().map(|&z| sigmoid(z)).collect();
    let anchors = anchors(arch);

    let (proposals, proposal_objectness) = match source {
        RoiSource::Override(boxes) => (boxes.to_vec(), vec![None; boxes.len()]),
        RoiSource::Rpn | RoiSource::RpnWithExtra(_) => {
            let (mut b, mut o) =
                rpn_proposals(arch, &anchors, &rpn_logits, &rpn_objectness, &rpn_deltas);
            if let RoiSource::RpnWithExtra(extra) = source {
                b.extend_from_slice(extra);
                o.extend(std::iter::repeat_n(None, extra.len()));
            }
            (b, o)
        }
    };

    let rois: Vec<[f64; 4]> = proposals.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect();
    let (roi_x, roi_pool) = roi_pool_forward(
        &features,
        fch,
        fsz,
        fsz,
        arch.feature_stride() as f64,
        &rois,
        arch.roi_pool_size,
        arch.roi_sampling,
    );
    let r = rois.len();
    let in_dim = fch * arch.roi_pool_size * arch.roi_pool_size;
    let mut roi_hidden = linear_forward(&roi_x, r, in_dim, &t[heads.roi_fc_w].data, &t[heads.roi_fc_b].data);
    relu_inplace(&mut roi_hidden);
    let hid = arch.roi_hidden;
    let logits = linear_forward(&roi_hidden, r, hid, &t[heads.roi_cls_w].data, &t[heads.roi_cls_b].data);
    let reg = linear_forward(&roi_hidden, r, hid, &t[heads.roi_reg_w].data, &t[heads.roi_reg_b].data);
    let k = arch.num_classes + 1;
    let roi_class_probs = (0..r)
        .map(|i| {
            let z: Vec<f64> = logits[i * k..(i + 1) * k].iter().map(|&v| v as f64).collect();
            softmax(&z)
        })
        .collect();
    let roi_deltas = (0..r)
        .map(|i| {
            let d = &reg[i * 4..(i + 1) * 4];
            DeltaVector::new(d[0] as f64, d[1] as f64, d[2] as f64, d[3] as f64)
        })
        .collect();

    Ok(ForwardPass {
        outputs: DetectorOutputs {
            anchors,
            rpn_logits,
            rpn_objectness,
            rpn_deltas,
            proposals,
            proposal_objectness,
            roi_class_probs,
            roi_deltas,
        },
        cache: Cache {
            backbone,
            rpn_conv,
            rpn_hidden,
            rpn_obj,
            rpn_del,
            roi_pool,
            roi_x,
            roi_hidden,
        },
    })
}

/// Full two-stage forward pass. With [`RoiSource::Override`] the ROI head runs
/// on exactly the given boxes, in order.
pub fn forward(
    params: &DetectorParams,
    image: &Image,
    source: RoiSource<'_>,
) -> Result<DetectorOutputs> {
    run(params, image, source).map(|p| p.outputs)
}

/// Forward pass that keeps activations for [`ForwardPass::backward`].
pub fn forward_train(
    params: &DetectorParams,
    image: &Image,
    source: RoiSource<'_>,
) -> Result<ForwardPass> {
    run(params, image, source)
}

impl ForwardPass {
    /// Backpropagates `grads` and accumulates parameter gradients into `acc`,
    /// which must share the structure of `params`.
    pub fn backward(&self, params: &DetectorParams, grads: &OutputGrads, acc: &mut DetectorParams) {
        let arch = &params.arch;
        let t = &params.tensors;
        let heads = slot::heads(arch.backbone_channels.len());
        let c = &self.cache;
        let a = arch.anchors_per_location();
        let fsz = arch.feature_size();
        let plane = fsz * fsz;
        let fch = arch.feature_channels();

        // ROI head.
        let r = self.outputs.proposals.len();
        let k = arch.num_classes + 1;
        let hid = arch.roi_hidden;
        let in_dim = fch * arch.roi_pool_size * arch.roi_pool_size;
        let mut grad_features = vec![0.0f32; fch * plane];
        if r > 0 {
            let g_logits: Vec<f32> = grads.roi_logits.iter().map(|&v| v as f32).collect();
            let g_reg: Vec<f32> = grads.roi_deltas.iter().flatten().map(|&v| v as f32).collect();
            let (w_cls, w_reg) = (&t[heads.roi_cls_w].data, &t[heads.roi_reg_w].data);
            let mut g_hidden = {
                let (gw, gb) = pair_mut(&mut acc.tensors, heads.roi_cls_w, heads.roi_cls_b);
                linear_backward(&c.roi_hidden, r, hid, w_cls, &g_logits, gw, gb, true)
                    .expect("requested")
            };
            {
                let (gw, gb) = pair_mut(&mut acc.tensors, heads.roi_reg_w, heads.roi_reg_b);
                let g2 = linear_backward(&c.roi_hidden, r, hid, w_reg, &g_reg, gw, gb, true)
                    .expect("requested");
                for (x, y) in g_hidden.iter_mut().zip(g2) {
                    *x += y;
                }
            }
            debug_assert_eq!(g_logits.len(), r * k);
            relu_backward_inplace(&c.roi_hidden, &mut g_hidden);
            let g_x = {
                let (gw, gb) = pair_mut(&mut acc.tensors, heads.roi_fc_w, heads.roi_fc_b);
                linear_backward(&c.roi_x, r, in_dim, &t[heads.roi_fc_w].data, &g_hidden, gw, gb, true)
                    .expect("requested")
            };
            roi_pool_backward(&c.roi_pool, &g_x, &mut grad_features);
        }

        // RPN head.
        let n_anchors = plane * a;
        let mut g_obj = vec![0.0f32; a * plane];
        let mut g_del = vec![0.0f32; 4 * a * plane];
        for idx in 0..n_anchors {
            let (pos, s) = (idx / a, idx % a);
            g_obj[s * plane + pos] = grads.rpn_logits[idx] as f32;
            for j in 0..4 {
                g_del[(4 * s + j) * plane + pos] = grads.rpn_deltas[idx][j] as f32;
            }
        }
        let mut g_rpn_hidden = {
            let (gw, gb) = pair_mut(&mut acc.tensors, heads.rpn_obj_w, heads.rpn_obj_b);
            conv2d_backward(&c.rpn_obj, &t[heads.rpn_obj_w].data, &g_obj, gw, gb, true)
                .expect("requested")
        };
        {
            let (gw, gb) = pair_mut(&mut acc.tensors, heads.rpn_del_w, heads.rpn_del_b);
            let g2 = conv2d_backward(&c.rpn_del, &t[heads.rpn_del_w].data, &g_del, gw, gb, true)
                .expect("requested");
            for (x, y) in g_rpn_hidden.iter_mut().zip(g2) {
                *x += y;
            }
        }
        relu_backward_inplace(&c.rpn_hidden, &mut g_rpn_hidden);
        {
            let (gw, gb) = pair_mut(&mut acc.tensors, heads.rpn_conv_w, heads.rpn_conv_b);
            let g2 = conv2d_backward(&c.rpn_conv, &t[heads.rpn_conv_w].data, &g_rpn_hidden, gw, gb, true)
                .expect("requested");
            for (x, y) in grad_features.iter_mut().zip(g2) {
                *x += y;
            }
        }

        // Backbone.
        let mut g = grad_features;
        for i in (0..c.backbone.len()).rev() {
            let (cache, out) = &c.backbone[i];
            relu_backward_inplace(out, &mut g);
            let (gw, gb) = pair_mut(
                &mut acc.tensors,
                slot::backbone_weight(i),
                slot::backbone_bias(i),
            );
            match conv2d_backward(cache, &t[slot::backbone_weight(i)].data, &g, gw, gb, i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }
}

/// Mutable data of two distinct tensors.
fn pair_mut(
    tensors: &mut [super::Tensor],
    a: usize,
    b: usize,
) -> (&mut [f32], &mut [f32]) {
    assert!(a < b);
    let (lo, hi) = tensors.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

/// Candidate detections from one forward pass: every proposal paired with
/// every foreground class, box refined by the class-agnostic regressor and
/// clipped to the image.
pub(crate) fn candidate_detections(arch: &ArchConfig, out: &DetectorOutputs) -> Vec<Detection> {
    let size = arch.image_size as f64;
    let mut dets = Vec::with_capacity(out.proposals.len() * arch.num_classes);
    for ((p, probs), d) in out
        .proposals
        .iter()
        .zip(&out.roi_class_probs)
        .zip(&out.roi_deltas)
    {
        let Some(b) = decode_deltas_clipped(p, d, size, size) else {
            continue;
        };
        for (c, &score) in probs[..arch.num_classes].iter().enumerate() {
            dets.push(Detection::new(b, c, score));
        }
    }
    dets
}

/// Inference: class-wise NMS first, then the score threshold, then the best
/// `max_detections` by score.
pub fn detect(
    params: &DetectorParams,
    image: &Image,
    score_threshold: f64,
    nms_threshold: f64,
    max_detections: usize,
) -> Result<Vec<Detection>> {
    let out = forward(params, image, RoiSource::Rpn)?;
    Ok(postprocess(
        &params.arch,
        &out,
        score_threshold,
        nms_threshold,
        max_detections,
    ))
}

pub(crate) fn postprocess(
    arch: &ArchConfig,
    out: &DetectorOutputs,
    score_threshold: f64,
    nms_threshold: f64,
    max_detections: usize,
) -> Vec<Detection> {
    let cands = candidate_detections(arch, out);
    nms(&cands, nms_threshold, true)
        .into_iter()
        .map(|i| cands[i])
        .filter(|d| d.score >= score_threshold)
        .take(max_detections)
        .collect()
}
