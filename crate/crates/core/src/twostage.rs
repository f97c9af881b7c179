//! Minimal two-stage detector: backbone, region proposal network, and a
//! fully connected RoI head over 4x4 nearest-neighbour feature crops.
//!
//! RPN anchors are labelled by three rules: each object's best anchor is
//! positive, any anchor above `rpn_pos_iou` is positive, and anchors below
//! `rpn_neg_iou` are negative candidates. Positives attributable to a
//! flip-marked object are turned into negatives that always enter the
//! sampled minibatch.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_delta, encode_delta, iou, nms, BoundingBox, BoxDelta, Detection};
use crate::modelcore::backbone::{Backbone, BackboneConfig, FeatureMap};
use crate::modelcore::layers::{leaky_relu_backward, leaky_relu_inplace, Conv2d, ConvCache, Linear};
use crate::modelcore::loss::{bce_with_logits, sigmoid, smooth_l1_elem, smooth_l1_elem_grad, softmax, softmax_cross_entropy};
use crate::modelcore::params::{DetectorParams, Grads, Partition};
use crate::onestage::{clamp_delta, AnchorSet};
use crate::regulate::{mask_sample, MASK_VALUE};
use crate::scenegen::{mix_seed, ObjectInstance, RgbImage, Scene};
use crate::train::{Detector, SampleContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpnLabel {
    Positive,
    Negative,
    Unused,
}

/// Sampling and labelling thresholds of the RPN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnAssignConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch_size: usize,
    pub max_positives: usize,
}

impl Default for RpnAssignConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.7,
            neg_iou: 0.3,
            batch_size: 256,
            max_positives: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignment {
    pub labels: Vec<RpnLabel>,
    /// Regression target of each positive anchor.
    pub targets: Vec<Option<BoxDelta>>,
    /// Object an anchor's positive status came from (kept for flipped anchors).
    pub attributed_gt: Vec<Option<usize>>,
    /// Anchors relabelled negative by the flip rule.
    pub flipped: Vec<usize>,
    /// Sorted anchor indices entering the loss.
    pub sampled: Vec<usize>,
}

impl AnchorAssignment {
    pub fn objectness_target(&self, i: usize) -> f64 {
        if self.labels[i] == RpnLabel::Positive {
            1.0
        } else {
            0.0
        }
    }

    pub fn count(&self, label: RpnLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Labels anchors and draws the RPN minibatch. Flip markers are read from
/// `ObjectInstance::flip`.
pub fn assign_rpn(
    anchors: &[BoundingBox],
    gt: &[ObjectInstance],
    config: &RpnAssignConfig,
    seed: u64,
) -> AnchorAssignment {
    let n = anchors.len();
    let mut labels = vec![RpnLabel::Unused; n];
    let mut attributed: Vec<Option<usize>> = vec![None; n];
    let mut max_iou = vec![0.0f64; n];
    let mut arg_gt = vec![0usize; n];
    let mut best_for_gt: Vec<Option<(usize, f64)>> = vec![None; gt.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (g, obj) in gt.iter().enumerate() {
            let v = iou(a, &obj.bbox);
            if v > max_iou[i] {
                max_iou[i] = v;
                arg_gt[i] = g;
            }
            if v > 0.0 && best_for_gt[g].map_or(true, |(_, b)| v > b) {
                best_for_gt[g] = Some((i, v));
            }
        }
        if max_iou[i] < config.neg_iou {
            labels[i] = RpnLabel::Negative;
        }
    }
    // rule 1: each object's best anchor; an earlier object keeps a shared one
    for (g, best) in best_for_gt.iter().enumerate() {
        if let Some((i, _)) = *best {
            if attributed[i].is_none() {
                labels[i] = RpnLabel::Positive;
                attributed[i] = Some(g);
            }
        }
    }
    // rule 2: high-overlap anchors
    for i in 0..n {
        if attributed[i].is_none() && max_iou[i] > config.pos_iou {
            labels[i] = RpnLabel::Positive;
            attributed[i] = Some(arg_gt[i]);
        }
    }
    let mut flipped = Vec::new();
    let mut targets: Vec<Option<BoxDelta>> = vec![None; n];
    for i in 0..n {
        if let Some(g) = attributed[i] {
            if gt[g].flip {
                labels[i] = RpnLabel::Negative;
                flipped.push(i);
            } else {
                targets[i] = Some(encode_delta(&anchors[i], &gt[g].bbox));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives: Vec<usize> = (0..n).filter(|&i| labels[i] == RpnLabel::Positive).collect();
    let mut sampled = draw(&positives, config.max_positives.min(config.batch_size), &mut rng);
    let mut budget = config.batch_size - sampled.len();
    let forced = draw(&flipped, budget, &mut rng);
    budget -= forced.len();
    sampled.extend(&forced);
    let others: Vec<usize> = (0..n)
        .filter(|&i| labels[i] == RpnLabel::Negative && attributed[i].is_none())
        .collect();
    sampled.extend(draw(&others, budget, &mut rng));
    sampled.sort_unstable();
    AnchorAssignment {
        labels,
        targets,
        attributed_gt: attributed,
        flipped,
        sampled,
    }
}

/// All of `pool` if it fits in `k`, else a seeded random `k`-subset.
fn draw(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    sample(rng, pool.len(), k).into_iter().map(|j| pool[j]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub objectness: Vec<f64>,
    /// `N x 4` deltas.
    pub deltas: Vec<f64>,
}

impl RpnOutput {
    pub fn zeros(n: usize) -> Self {
        Self {
            objectness: vec![0.0; n],
            deltas: vec![0.0; 4 * n],
        }
    }

    pub fn len(&self) -> usize {
        self.objectness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objectness.is_empty()
    }

    pub fn delta(&self, i: usize) -> BoxDelta {
        BoxDelta::from_slice(&self.deltas[4 * i..4 * i + 4])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RpnLossParts {
    pub classification: f64,
    pub regression: f64,
    pub total: f64,
}

/// BCE over the sampled anchors divided by their count, plus `lambda` times
/// the SmoothL1 of sampled positives divided by `n_reg`.
pub fn rpn_loss(
    output: &RpnOutput,
    assignment: &AnchorAssignment,
    lambda: f64,
    n_reg: usize,
) -> Result<(RpnLossParts, RpnOutput)> {
    let n = output.len();
    if assignment.labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} RPN outputs vs {} labelled anchors",
            assignment.labels.len()
        )));
    }
    let mut grad = RpnOutput::zeros(n);
    let mut parts = RpnLossParts::default();
    if assignment.sampled.is_empty() {
        log::warn!("RPN minibatch is empty; loss is zero");
        return Ok((parts, grad));
    }
    let n_cls = assignment.sampled.len() as f64;
    let n_reg = n_reg.max(1) as f64;
    for &i in &assignment.sampled {
        let (l, g) = bce_with_logits(output.objectness[i], assignment.objectness_target(i));
        parts.classification += l / n_cls;
        grad.objectness[i] = g / n_cls;
        if assignment.labels[i] != RpnLabel::Positive {
            continue;
        }
        let t = assignment.targets[i].expect("positive anchors carry targets").to_array();
        for k in 0..4 {
            let d = output.deltas[4 * i + k] - t[k];
            parts.regression += lambda * smooth_l1_elem(d) / n_reg;
            grad.deltas[4 * i + k] = lambda * smooth_l1_elem_grad(d) / n_reg;
        }
    }
    parts.total = parts.classification + parts.regression;
    if !parts.total.is_finite() {
        return Err(Error::Divergence(format!("RPN loss is {}", parts.total)));
    }
    Ok((parts, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Smallest side (pixels) of a proposal that is kept.
pub const MIN_PROPOSAL_SIZE: f64 = 2.0;

/// Decodes every anchor, orders by objectness (ties by anchor index) and
/// greedily suppresses overlaps above `nms_threshold` until `top_k` remain.
pub fn generate_proposals(
    output: &RpnOutput,
    anchors: &[BoundingBox],
    top_k: usize,
    nms_threshold: f64,
    image_size: (f64, f64),
) -> Vec<Proposal> {
    let mut cands: Vec<(usize, Proposal)> = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let Ok(b) = decode_delta(a, &clamp_delta(output.delta(i)), Some(image_size)) else {
            continue;
        };
        if b.width() < MIN_PROPOSAL_SIZE || b.height() < MIN_PROPOSAL_SIZE {
            continue;
        }
        cands.push((
            i,
            Proposal {
                bbox: b,
                score: sigmoid(output.objectness[i]),
            },
        ));
    }
    cands.sort_by(|a, b| {
        output.objectness[b.0]
            .total_cmp(&output.objectness[a.0])
            .then(a.0.cmp(&b.0))
    });
    let mut kept: Vec<Proposal> = Vec::with_capacity(top_k);
    for (_, p) in cands {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &p.bbox) <= nms_threshold) {
            kept.push(p);
        }
    }
    kept
}

/// Training targets for RoIs: class 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTargets {
    pub classes: Vec<usize>,
    pub deltas: Vec<Option<BoxDelta>>,
    /// Whether the RoI may be sampled: foreground, or background overlapping
    /// some annotated object (flip-marked ones included) by at least `bg_iou_low`.
    pub eligible: Vec<bool>,
}

/// Matches each RoI to the unflagged object of highest IoU; IoU at or above
/// `fg_iou` makes it foreground. Flip-marked objects never match, so RoIs
/// on them are background.
pub fn match_rois(rois: &[BoundingBox], gt: &[ObjectInstance], fg_iou: f64, bg_iou_low: f64) -> RoiTargets {
    let mut t = RoiTargets {
        classes: vec![0; rois.len()],
        deltas: vec![None; rois.len()],
        eligible: vec![false; rois.len()],
    };
    for (r, roi) in rois.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        let mut any_overlap = 0.0f64;
        for (g, obj) in gt.iter().enumerate() {
            let v = iou(roi, &obj.bbox);
            any_overlap = any_overlap.max(v);
            if obj.flip {
                continue;
            }
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= fg_iou {
                t.classes[r] = gt[g].class_id + 1;
                t.deltas[r] = Some(encode_delta(roi, &gt[g].bbox));
            }
        }
        t.eligible[r] = t.classes[r] > 0 || any_overlap >= bg_iou_low;
    }
    t
}

/// Draws up to `batch` eligible RoIs with at most `fg_fraction` foreground.
pub fn sample_rois(targets: &RoiTargets, batch: usize, fg_fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = targets.classes.len();
    let fg: Vec<usize> = (0..n).filter(|&i| targets.classes[i] > 0).collect();
    let bg: Vec<usize> = (0..n)
        .filter(|&i| targets.classes[i] == 0 && targets.eligible[i])
        .collect();
    let max_fg = ((batch as f64) * fg_fraction).floor() as usize;
    let mut out = draw(&fg, max_fg, &mut rng);
    let rest = batch - out.len();
    out.extend(draw(&bg, rest, &mut rng));
    out.sort_unstable();
    out
}

/// Per-RoI head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub num_classes: usize,
    /// `R x (C + 1)`.
    pub class_logits: Vec<f64>,
    /// `R x 4C`; class `c` (foreground index `c + 1`) uses columns `4c..4c+4`.
    pub deltas: Vec<f64>,
}

impl HeadOutput {
    pub fn len(&self) -> usize {
        self.class_logits.len() / (self.num_classes + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.class_logits.is_empty()
    }

    pub fn logits(&self, r: usize) -> &[f64] {
        let k = self.num_classes + 1;
        &self.class_logits[r * k..(r + 1) * k]
    }

    pub fn delta(&self, r: usize, class: usize) -> BoxDelta {
        let base = r * 4 * self.num_classes + 4 * class;
        BoxDelta::from_slice(&self.deltas[base..base + 4])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadLossParts {
    pub classification: f64,
    pub regression: f64,
    pub total: f64,
}

/// Cross-entropy over all RoIs plus `lambda` times SmoothL1 of foreground
/// RoIs' class-specific deltas, both divided by the RoI count.
pub fn head_loss(
    out: &HeadOutput,
    classes: &[usize],
    deltas: &[Option<BoxDelta>],
    lambda: f64,
) -> Result<(HeadLossParts, HeadOutput)> {
    let r_n = out.len();
    if classes.len() != r_n || deltas.len() != r_n {
        return Err(Error::Shape("head targets do not match RoI count".into()));
    }
    let c = out.num_classes;
    let mut grad = HeadOutput {
        num_classes: c,
        class_logits: vec![0.0; out.class_logits.len()],
        deltas: vec![0.0; out.deltas.len()],
    };
    let mut parts = HeadLossParts::default();
    if r_n == 0 {
        return Ok((parts, grad));
    }
    let norm = r_n as f64;
    for r in 0..r_n {
        let (l, g) = softmax_cross_entropy(out.logits(r), classes[r]);
        parts.classification += l / norm;
        for (dst, v) in grad.class_logits[r * (c + 1)..(r + 1) * (c + 1)].iter_mut().zip(g) {
            *dst = v / norm;
        }
        if classes[r] == 0 {
            continue;
        }
        let t = deltas[r].expect("foreground RoIs carry targets").to_array();
        let base = r * 4 * c + 4 * (classes[r] - 1);
        for k in 0..4 {
            let d = out.deltas[base + k] - t[k];
            parts.regression += lambda * smooth_l1_elem(d) / norm;
            grad.deltas[base + k] = lambda * smooth_l1_elem_grad(d) / norm;
        }
    }
    parts.total = parts.classification + parts.regression;
    if !parts.total.is_finite() {
        return Err(Error::Divergence(format!("head loss is {}", parts.total)));
    }
    Ok((parts, grad))
}

/// Detector loss as the sum of its RPN and head parts.
pub fn combined_detector_loss(rpn: f64, head: f64) -> Result<f64> {
    if !(rpn.is_finite() && head.is_finite()) {
        return Err(Error::Divergence(format!("non-finite loss parts {rpn}, {head}")));
    }
    Ok(rpn + head)
}

/// Softmax scores per RoI; every foreground class at or above the
/// threshold yields a box refined by that class's deltas; then class-wise NMS.
pub fn decode_twostage(
    out: &HeadOutput,
    rois: &[BoundingBox],
    confidence_threshold: f64,
    nms_threshold: f64,
    image_size: (f64, f64),
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (r, roi) in rois.iter().enumerate() {
        let probs = softmax(out.logits(r));
        for c in 0..out.num_classes {
            let p = probs[c + 1];
            if p < confidence_threshold {
                continue;
            }
            if let Ok(b) = decode_delta(roi, &clamp_delta(out.delta(r, c)), Some(image_size)) {
                dets.push(Detection {
                    bbox: b,
                    class_id: c,
                    confidence: p.clamp(0.0, 1.0),
                });
            }
        }
    }
    nms(&dets, nms_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    /// Anchor `sqrt(w * h)` values.
    pub rpn_scales: Vec<f64>,
    /// Anchor height / width ratios.
    pub rpn_ratios: Vec<f64>,
    pub rpn_channels: usize,
    pub rpn_assign: RpnAssignConfig,
    pub rpn_lambda: f64,
    pub rpn_nms: f64,
    pub train_top_k: usize,
    pub test_top_k: usize,
    pub roi_size: usize,
    pub fc_dim: usize,
    pub head_fg_iou: f64,
    /// Background RoIs must overlap some annotated object at least this much.
    pub head_bg_iou_low: f64,
    pub head_batch: usize,
    pub head_fg_fraction: f64,
    pub head_lambda: f64,
    pub objectness_prior: f64,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_classes: 3,
            rpn_scales: vec![12.0, 22.0, 40.0],
            rpn_ratios: vec![1.0, 1.6, 2.4],
            rpn_channels: 32,
            rpn_assign: RpnAssignConfig::default(),
            rpn_lambda: 1.0,
            rpn_nms: 0.7,
            train_top_k: 64,
            test_top_k: 32,
            roi_size: 4,
            fc_dim: 128,
            head_fg_iou: 0.5,
            head_bg_iou_low: 0.1,
            head_batch: 32,
            head_fg_fraction: 0.25,
            head_lambda: 1.0,
            objectness_prior: 0.01,
        }
    }
}

impl TwoStageConfig {
    pub fn anchor_sizes(&self) -> Vec<(f64, f64)> {
        let mut sizes = Vec::new();
        for &s in &self.rpn_scales {
            for &r in &self.rpn_ratios {
                sizes.push((s / r.sqrt(), s * r.sqrt()));
            }
        }
        sizes
    }
}

/// Feature-map cells sampled by one RoI crop.
fn crop_cells(roi: &BoundingBox, size: usize, stride: f64, fh: usize, fw: usize) -> Vec<usize> {
    let mut cells = Vec::with_capacity(size * size);
    let (bw, bh) = (roi.width() / size as f64, roi.height() / size as f64);
    for i in 0..size {
        let y = ((roi.y_min() + (i as f64 + 0.5) * bh) / stride - 0.5).round();
        let y = y.clamp(0.0, (fh - 1) as f64) as usize;
        for j in 0..size {
            let x = ((roi.x_min() + (j as f64 + 0.5) * bw) / stride - 0.5).round();
            let x = x.clamp(0.0, (fw - 1) as f64) as usize;
            cells.push(y * fw + x);
        }
    }
    cells
}

/// Nearest-neighbour crops, one `C * size^2` row per RoI (channel-major).
pub fn roi_crop(feature: &FeatureMap, rois: &[BoundingBox], size: usize, stride: f64) -> Vec<f64> {
    let plane = feature.height * feature.width;
    let dim = feature.channels * size * size;
    let mut out = vec![0.0; rois.len() * dim];
    for (r, roi) in rois.iter().enumerate() {
        let cells = crop_cells(roi, size, stride, feature.height, feature.width);
        let row = &mut out[r * dim..(r + 1) * dim];
        for ch in 0..feature.channels {
            for (k, &cell) in cells.iter().enumerate() {
                row[ch * size * size + k] = feature.data[ch * plane + cell];
            }
        }
    }
    out
}

fn roi_crop_backward(
    dcrop: &[f64],
    rois: &[BoundingBox],
    size: usize,
    stride: f64,
    channels: usize,
    fh: usize,
    fw: usize,
    dfeature: &mut [f64],
) {
    let plane = fh * fw;
    let dim = channels * size * size;
    for (r, roi) in rois.iter().enumerate() {
        let cells = crop_cells(roi, size, stride, fh, fw);
        let row = &dcrop[r * dim..(r + 1) * dim];
        for ch in 0..channels {
            for (k, &cell) in cells.iter().enumerate() {
                dfeature[ch * plane + cell] += row[ch * size * size + k];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TwoStageLossParts {
    pub rpn: RpnLossParts,
    pub head: HeadLossParts,
    /// Feature loss; zero unless regulated training added it.
    pub feature: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageDetector {
    pub config: TwoStageConfig,
    pub backbone: Backbone,
    pub anchors: AnchorSet,
    rpn_conv: Conv2d,
    rpn_out: Conv2d,
    fc1: Linear,
    fc_cls: Linear,
    fc_reg: Linear,
}

struct RpnCache {
    conv: ConvCache,
    act: Vec<f64>,
    out: ConvCache,
}

struct HeadCache {
    crops: Vec<f64>,
    hidden: Vec<f64>,
}

impl TwoStageDetector {
    pub fn new(config: TwoStageConfig) -> Self {
        let backbone = Backbone::new(config.backbone.clone());
        let g = config.backbone.feature_size();
        let sizes = config.anchor_sizes();
        let anchors = AnchorSet::new(g, g, config.backbone.stride(), &sizes);
        let fc = config.backbone.feature_channels();
        let rpn_conv = Conv2d::new("rpn.conv", fc, config.rpn_channels, 3, 1, Partition::Head);
        let rpn_out = Conv2d::new("rpn.out", config.rpn_channels, sizes.len() * 5, 1, 1, Partition::Head);
        let crop_dim = fc * config.roi_size * config.roi_size;
        let fc1 = Linear::new("roi.fc1", crop_dim, config.fc_dim, Partition::Head);
        let fc_cls = Linear::new("roi.cls", config.fc_dim, config.num_classes + 1, Partition::Head);
        let fc_reg = Linear::new("roi.reg", config.fc_dim, 4 * config.num_classes, Partition::Head);
        Self {
            config,
            backbone,
            anchors,
            rpn_conv,
            rpn_out,
            fc1,
            fc_cls,
            fc_reg,
        }
    }

    fn image_size(&self) -> (f64, f64) {
        let s = self.config.backbone.input_size as f64;
        (s, s)
    }

    pub fn init_params(&self, seed: u64) -> DetectorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = DetectorParams::new();
        self.backbone.init(&mut params, &mut rng);
        self.rpn_conv.init(&mut params, 1.0, &mut rng);
        self.rpn_out.init(&mut params, 0.1, &mut rng);
        self.fc1.init(&mut params, 1.0, &mut rng);
        self.fc_cls.init(&mut params, 0.1, &mut rng);
        self.fc_reg.init(&mut params, 0.1, &mut rng);
        let prior = self.config.objectness_prior;
        let bias = (prior / (1.0 - prior)).ln();
        let b = &mut params.get_mut(&self.rpn_out.bias_name()).data;
        for a in 0..self.anchors.per_cell() {
            b[a * 5] = bias;
        }
        params
    }

    fn rpn_forward(&self, params: &DetectorParams, feature: &FeatureMap) -> (RpnOutput, RpnCache) {
        let (h, w) = (feature.height, feature.width);
        let (mut act, conv) = self.rpn_conv.forward(params, &feature.data, h, w);
        leaky_relu_inplace(&mut act);
        let (raw, out) = self.rpn_out.forward(params, &act, h, w);
        let cells = h * w;
        let a_n = self.anchors.per_cell();
        let mut o = RpnOutput::zeros(cells * a_n);
        for cell in 0..cells {
            for a in 0..a_n {
                let i = cell * a_n + a;
                o.objectness[i] = raw[(a * 5) * cells + cell];
                for k in 0..4 {
                    o.deltas[4 * i + k] = raw[(a * 5 + 1 + k) * cells + cell];
                }
            }
        }
        (o, RpnCache { conv, act, out })
    }

    /// Adds the RPN's parameter gradients; returns the feature gradient.
    fn rpn_backward(&self, params: &DetectorParams, cache: &RpnCache, g: &RpnOutput, grads: &mut Grads) -> Vec<f64> {
        let cells = self.anchors.cell_count();
        let a_n = self.anchors.per_cell();
        let mut draw = vec![0.0; a_n * 5 * cells];
        for cell in 0..cells {
            for a in 0..a_n {
                let i = cell * a_n + a;
                draw[(a * 5) * cells + cell] = g.objectness[i];
                for k in 0..4 {
                    draw[(a * 5 + 1 + k) * cells + cell] = g.deltas[4 * i + k];
                }
            }
        }
        let mut dact = self
            .rpn_out
            .backward(params, &cache.out, &draw, grads, false, true)
            .expect("input gradient requested");
        leaky_relu_backward(&cache.act, &mut dact);
        self.rpn_conv
            .backward(params, &cache.conv, &dact, grads, false, true)
            .expect("input gradient requested")
    }

    fn head_forward(&self, params: &DetectorParams, feature: &FeatureMap, rois: &[BoundingBox]) -> (HeadOutput, HeadCache) {
        let n = rois.len();
        let crops = roi_crop(feature, rois, self.config.roi_size, self.config.backbone.stride());
        let mut hidden = self.fc1.forward(params, &crops, n);
        leaky_relu_inplace(&mut hidden);
        let out = HeadOutput {
            num_classes: self.config.num_classes,
            class_logits: self.fc_cls.forward(params, &hidden, n),
            deltas: self.fc_reg.forward(params, &hidden, n),
        };
        (out, HeadCache { crops, hidden })
    }

    /// Adds head parameter gradients and scatters into `dfeature`.
    fn head_backward(
        &self,
        params: &DetectorParams,
        cache: &HeadCache,
        rois: &[BoundingBox],
        g: &HeadOutput,
        grads: &mut Grads,
        dfeature: &mut [f64],
    ) {
        let n = rois.len();
        let mut dh = self
            .fc_cls
            .backward(params, &cache.hidden, &g.class_logits, n, grads, false, true)
            .expect("input gradient requested");
        let dh2 = self
            .fc_reg
            .backward(params, &cache.hidden, &g.deltas, n, grads, false, true)
            .expect("input gradient requested");
        dh.iter_mut().zip(&dh2).for_each(|(a, b)| *a += b);
        leaky_relu_backward(&cache.hidden, &mut dh);
        let dcrop = self
            .fc1
            .backward(params, &cache.crops, &dh, n, grads, false, true)
            .expect("input gradient requested");
        let fs = self.config.backbone.feature_size();
        roi_crop_backward(
            &dcrop,
            rois,
            self.config.roi_size,
            self.config.backbone.stride(),
            self.config.backbone.feature_channels(),
            fs,
            fs,
            dfeature,
        );
    }

    pub fn rpn_output(&self, params: &DetectorParams, image: &[f64]) -> Result<(FeatureMap, RpnOutput)> {
        let (feat, _) = self.backbone.forward(params, image)?;
        let (out, _) = self.rpn_forward(params, &feat);
        Ok((feat, out))
    }

    /// Training RoIs: proposals followed by every annotated box.
    pub fn training_rois(&self, proposals: &[Proposal], gt: &[ObjectInstance]) -> Vec<BoundingBox> {
        proposals.iter().map(|p| p.bbox).chain(gt.iter().map(|o| o.bbox)).collect()
    }

    /// Detector loss (plus the feature loss when `masked` is given) for one
    /// image, accumulating `scale` times its gradient. `fixed_rois`
    /// replaces proposal generation (used by gradient checks, where the
    /// discrete proposal set must not move).
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate(
        &self,
        params: &DetectorParams,
        image: &[f64],
        gt: &[ObjectInstance],
        masked: Option<&[f64]>,
        seed: u64,
        fixed_rois: Option<&[BoundingBox]>,
        grads: &mut Grads,
        scale: f64,
        train_backbone: bool,
    ) -> Result<TwoStageLossParts> {
        let (feat, bb_cache) = self.backbone.forward(params, image)?;
        let (rpn_out, rpn_cache) = self.rpn_forward(params, &feat);
        let assignment = assign_rpn(&self.anchors.boxes, gt, &self.config.rpn_assign, seed);
        let (rpn_parts, mut drpn) = rpn_loss(&rpn_out, &assignment, self.config.rpn_lambda, self.anchors.cell_count())?;

        let all_rois = match fixed_rois {
            Some(r) => r.to_vec(),
            None => {
                let props = generate_proposals(
                    &rpn_out,
                    &self.anchors.boxes,
                    self.config.train_top_k,
                    self.config.rpn_nms,
                    self.image_size(),
                );
                self.training_rois(&props, gt)
            }
        };
        let matched = match_rois(&all_rois, gt, self.config.head_fg_iou, self.config.head_bg_iou_low);
        let picked = sample_rois(
            &matched,
            self.config.head_batch,
            self.config.head_fg_fraction,
            mix_seed(seed, 1),
        );
        let rois: Vec<BoundingBox> = picked.iter().map(|&i| all_rois[i]).collect();
        let classes: Vec<usize> = picked.iter().map(|&i| matched.classes[i]).collect();
        let deltas: Vec<Option<BoxDelta>> = picked.iter().map(|&i| matched.deltas[i]).collect();
        let (head_out, head_cache) = self.head_forward(params, &feat, &rois);
        let (head_parts, mut dhead) = head_loss(&head_out, &classes, &deltas, self.config.head_lambda)?;

        let mut parts = TwoStageLossParts {
            rpn: rpn_parts,
            head: head_parts,
            feature: 0.0,
            total: combined_detector_loss(rpn_parts.total, head_parts.total)?,
        };

        scale_rpn(&mut drpn, scale);
        dhead.class_logits.iter_mut().for_each(|v| *v *= scale);
        dhead.deltas.iter_mut().for_each(|v| *v *= scale);
        let mut dfeat = self.rpn_backward(params, &rpn_cache, &drpn, grads);
        self.head_backward(params, &head_cache, &rois, &dhead, grads, &mut dfeat);

        if let Some(masked) = masked {
            let (f_mask, c_mask) = self.backbone.forward(params, masked)?;
            let (lf, g) = crate::modelcore::smooth_l1_with_grad(&feat.data, &f_mask.data)?;
            parts.feature = lf;
            parts.total += lf;
            if train_backbone {
                for (d, gi) in dfeat.iter_mut().zip(&g) {
                    *d += gi * scale;
                }
                let down: Vec<f64> = g.iter().map(|v| -v * scale).collect();
                self.backbone.backward(params, &c_mask, &down, grads, false);
            }
        }
        if train_backbone {
            self.backbone.backward(params, &bb_cache, &dfeat, grads, false);
        }
        Ok(parts)
    }

    pub fn detect(
        &self,
        params: &DetectorParams,
        image: &[f64],
        confidence_threshold: f64,
        nms_threshold: f64,
    ) -> Result<Vec<Detection>> {
        let (feat, _) = self.backbone.forward(params, image)?;
        let (rpn_out, _) = self.rpn_forward(params, &feat);
        let props = generate_proposals(
            &rpn_out,
            &self.anchors.boxes,
            self.config.test_top_k,
            self.config.rpn_nms,
            self.image_size(),
        );
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let rois: Vec<BoundingBox> = props.iter().map(|p| p.bbox).collect();
        let (head_out, _) = self.head_forward(params, &feat, &rois);
        Ok(decode_twostage(&head_out, &rois, confidence_threshold, nms_threshold, self.image_size()))
    }
}

fn scale_rpn(g: &mut RpnOutput, s: f64) {
    g.objectness.iter_mut().for_each(|v| *v *= s);
    g.deltas.iter_mut().for_each(|v| *v *= s);
}

impl Detector for TwoStageDetector {
    fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({"kind": "twostage", "config": self.config})
    }

    fn init_params(&self, seed: u64) -> DetectorParams {
        TwoStageDetector::init_params(self, seed)
    }

    fn sample_loss(
        &self,
        params: &DetectorParams,
        scene: &Scene,
        ctx: &SampleContext,
        grads: &mut Grads,
        scale: f64,
    ) -> Result<f64> {
        let masked = if ctx.feature_loss && scene.poisoned {
            Some(mask_sample(scene, MASK_VALUE)?.masked.to_planar())
        } else {
            None
        };
        let parts = self.accumulate(
            params,
            &scene.image.to_planar(),
            &scene.objects,
            masked.as_deref(),
            ctx.seed,
            None,
            grads,
            scale,
            ctx.train_backbone,
        )?;
        Ok(parts.total)
    }

    fn detect_image(
        &self,
        params: &DetectorParams,
        image: &RgbImage,
        confidence_threshold: f64,
        nms_threshold: f64,
    ) -> Result<Vec<Detection>> {
        self.detect(params, &image.to_planar(), confidence_threshold, nms_threshold)
    }
}
