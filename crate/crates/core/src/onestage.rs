//! Minimal anchor-based one-stage detector.
//!
//! Every anchor of a 12x12 grid predicts an objectness logit, class logits and
//! a box delta. Training assigns each ground-truth object to its single best
//! anchor; decoding scores anchors by `sigmoid(objectness) * softmax(class)`
//! and runs class-wise NMS.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_delta, encode_delta, iou, nms, BoundingBox, BoxDelta, Detection};
use crate::modelcore::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::modelcore::layers::{leaky_relu_backward, leaky_relu_inplace, Conv2d, ConvCache};
use crate::modelcore::loss::{
    bce_with_logits, sigmoid, smooth_l1_elem, smooth_l1_elem_grad, softmax, softmax_cross_entropy,
};
use crate::modelcore::params::{DetectorParams, Grads, Partition};
use crate::scenegen::{ObjectInstance, RgbImage, Scene};
use crate::train::{Detector, SampleContext};

/// Largest log-size ratio accepted when decoding, `ln(1000 / 16)`.
/// Starting logit of a class added by [`OneStageDetector::extend_classes`]:
/// low enough that the extended model initially decodes like the original.
pub const NEW_CLASS_LOGIT: f64 = -10.0;

pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Anchor boxes tiled over the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: f64,
    pub sizes: Vec<(f64, f64)>,
    pub boxes: Vec<BoundingBox>,
}

impl AnchorSet {
    /// Anchors centered on each cell; index is `(gy * grid_w + gx) * A + a`.
    pub fn new(grid_h: usize, grid_w: usize, stride: f64, sizes: &[(f64, f64)]) -> Self {
        let mut boxes = Vec::with_capacity(grid_h * grid_w * sizes.len());
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let cx = (gx as f64 + 0.5) * stride;
                let cy = (gy as f64 + 0.5) * stride;
                for &(w, h) in sizes {
                    boxes.push(BoundingBox::from_center(cx, cy, w, h).expect("positive anchor size"));
                }
            }
        }
        Self {
            grid_h,
            grid_w,
            stride,
            sizes: sizes.to_vec(),
            boxes,
        }
    }

    pub fn per_cell(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn cell_count(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Per-anchor predictions of the dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    pub num_classes: usize,
    pub objectness: Vec<f64>,
    /// `N x C`, row per anchor.
    pub class_logits: Vec<f64>,
    /// `N x 4`, `(tx, ty, tw, th)` per anchor.
    pub deltas: Vec<f64>,
}

impl DenseHead {
    pub fn zeros(n_anchors: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            objectness: vec![0.0; n_anchors],
            class_logits: vec![0.0; n_anchors * num_classes],
            deltas: vec![0.0; n_anchors * 4],
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

    pub fn classes(&self, i: usize) -> &[f64] {
        &self.class_logits[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStageTargets {
    pub labels: Vec<AnchorLabel>,
    /// Class id for positives (0 elsewhere).
    pub classes: Vec<usize>,
    /// Regression target for positives (zero elsewhere).
    pub deltas: Vec<BoxDelta>,
    /// Index of the ground-truth object each positive anchor learns.
    pub matched_gt: Vec<Option<usize>>,
}

impl OneStageTargets {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }
}

/// Each annotation takes its highest-IoU anchor (the next best free one when
/// an earlier object already owns it). Other anchors overlapping any
/// annotation above `ignore_iou` are ignored; the rest are negatives.
pub fn assign_onestage(anchors: &AnchorSet, gt: &[ObjectInstance], ignore_iou: f64) -> OneStageTargets {
    let n = anchors.len();
    let mut t = OneStageTargets {
        labels: vec![AnchorLabel::Negative; n],
        classes: vec![0; n],
        deltas: vec![BoxDelta::default(); n],
        matched_gt: vec![None; n],
    };
    if gt.is_empty() {
        return t;
    }
    let mut max_iou = vec![0.0f64; n];
    for (g_idx, obj) in gt.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in anchors.boxes.iter().enumerate() {
            let v = iou(a, &obj.bbox);
            max_iou[i] = max_iou[i].max(v);
            if t.labels[i] == AnchorLabel::Positive {
                continue;
            }
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            t.labels[i] = AnchorLabel::Positive;
            t.classes[i] = obj.class_id;
            t.deltas[i] = encode_delta(&anchors.boxes[i], &obj.bbox);
            t.matched_gt[i] = Some(g_idx);
        }
    }
    for i in 0..n {
        if t.labels[i] != AnchorLabel::Positive && max_iou[i] > ignore_iou {
            t.labels[i] = AnchorLabel::Ignore;
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub objectness: f64,
    pub class: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            objectness: 1.0,
            class: 1.0,
            bbox: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OneStageLossParts {
    pub objectness: f64,
    pub class: f64,
    pub bbox: f64,
    pub total: f64,
}

/// Composite loss and its gradient with respect to the head outputs.
///
/// Terms are summed over anchors and divided by `max(#positives, 1)`:
/// objectness BCE over positives and negatives, class cross-entropy and
/// SmoothL1 box regression over positives only.
pub fn onestage_loss(
    pred: &DenseHead,
    targets: &OneStageTargets,
    weights: &LossWeights,
) -> Result<(OneStageLossParts, DenseHead)> {
    let n = pred.len();
    if targets.labels.len() != n {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            n,
            targets.labels.len()
        )));
    }
    let c = pred.num_classes;
    let norm = targets.positives().max(1) as f64;
    let mut grad = DenseHead::zeros(n, c);
    let mut parts = OneStageLossParts::default();
    for i in 0..n {
        let label = targets.labels[i];
        if label == AnchorLabel::Ignore {
            continue;
        }
        let target = if label == AnchorLabel::Positive { 1.0 } else { 0.0 };
        let (l, g) = bce_with_logits(pred.objectness[i], target);
        parts.objectness += l / norm;
        grad.objectness[i] = weights.objectness * g / norm;
        if label != AnchorLabel::Positive {
            continue;
        }
        let cls = targets.classes[i];
        if cls >= c {
            return Err(Error::Shape(format!("class id {cls} with {c} class logits")));
        }
        let (l, g) = softmax_cross_entropy(pred.classes(i), cls);
        parts.class += l / norm;
        for (dst, gv) in grad.class_logits[i * c..(i + 1) * c].iter_mut().zip(g) {
            *dst = weights.class * gv / norm;
        }
        let tgt = targets.deltas[i].to_array();
        for k in 0..4 {
            let d = pred.deltas[4 * i + k] - tgt[k];
            parts.bbox += smooth_l1_elem(d) / norm;
            grad.deltas[4 * i + k] = weights.bbox * smooth_l1_elem_grad(d) / norm;
        }
    }
    parts.total =
        weights.objectness * parts.objectness + weights.class * parts.class + weights.bbox * parts.bbox;
    if !parts.total.is_finite() {
        return Err(Error::Divergence(format!("one-stage loss is {}", parts.total)));
    }
    Ok((parts, grad))
}

/// Clamps the log-size components so `exp` cannot overflow.
pub(crate) fn clamp_delta(d: BoxDelta) -> BoxDelta {
    BoxDelta::new(d.tx, d.ty, d.tw.min(MAX_LOG_SCALE), d.th.min(MAX_LOG_SCALE))
}

/// Scores, decodes, thresholds and suppresses the dense predictions.
pub fn decode_onestage(
    pred: &DenseHead,
    anchors: &AnchorSet,
    confidence_threshold: f64,
    nms_threshold: f64,
    image_size: (f64, f64),
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for i in 0..pred.len() {
        let obj = sigmoid(pred.objectness[i]);
        if obj < confidence_threshold {
            continue;
        }
        let probs = softmax(pred.classes(i));
        let (cls, p) = probs
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        let conf = obj * p;
        if conf < confidence_threshold {
            continue;
        }
        if let Ok(b) = decode_delta(&anchors.boxes[i], &clamp_delta(pred.delta(i)), Some(image_size)) {
            dets.push(Detection {
                bbox: b,
                class_id: cls,
                confidence: conf.clamp(0.0, 1.0),
            });
        }
    }
    nms(&dets, nms_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneStageConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub anchor_sizes: Vec<(f64, f64)>,
    pub head_channels: usize,
    pub ignore_iou: f64,
    pub loss_weights: LossWeights,
    /// Initial foreground probability encoded in the objectness bias.
    pub objectness_prior: f64,
}

impl Default for OneStageConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_classes: 3,
            anchor_sizes: vec![(16.0, 24.0), (24.0, 36.0), (40.0, 56.0)],
            head_channels: 32,
            ignore_iou: 0.5,
            loss_weights: LossWeights::default(),
            objectness_prior: 0.01,
        }
    }
}

/// Forward state needed for backprop.
pub struct OneStageCache {
    backbone: BackboneCache,
    head_cache: ConvCache,
    head_act: Vec<f64>,
    out_cache: ConvCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStageDetector {
    pub config: OneStageConfig,
    pub backbone: Backbone,
    pub anchors: AnchorSet,
    head_conv: Conv2d,
    out_conv: Conv2d,
}

impl OneStageDetector {
    pub fn new(config: OneStageConfig) -> Self {
        let backbone = Backbone::new(config.backbone.clone());
        let g = config.backbone.feature_size();
        let anchors = AnchorSet::new(g, g, config.backbone.stride(), &config.anchor_sizes);
        let fc = config.backbone.feature_channels();
        let head_conv = Conv2d::new("onestage.head", fc, config.head_channels, 3, 1, Partition::Head);
        let out_conv = Conv2d::new(
            "onestage.out",
            config.head_channels,
            config.anchor_sizes.len() * (5 + config.num_classes),
            1,
            1,
            Partition::Head,
        );
        Self {
            config,
            backbone,
            anchors,
            head_conv,
            out_conv,
        }
    }

    fn fields(&self) -> usize {
        5 + self.config.num_classes
    }

    pub fn init_params(&self, seed: u64) -> DetectorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = DetectorParams::new();
        self.backbone.init(&mut params, &mut rng);
        self.head_conv.init(&mut params, 1.0, &mut rng);
        self.out_conv.init(&mut params, 0.1, &mut rng);
        let prior = self.config.objectness_prior;
        let bias = ((prior) / (1.0 - prior)).ln();
        let fields = self.fields();
        let b = &mut params.get_mut(&self.out_conv.bias_name()).data;
        for a in 0..self.anchors.per_cell() {
            b[a * fields] = bias;
        }
        params
    }

    fn unpack(&self, out: &[f64]) -> DenseHead {
        let cells = self.anchors.cell_count();
        let a_n = self.anchors.per_cell();
        let c = self.config.num_classes;
        let f = self.fields();
        let mut head = DenseHead::zeros(cells * a_n, c);
        for cell in 0..cells {
            for a in 0..a_n {
                let i = cell * a_n + a;
                let ch = |k: usize| out[(a * f + k) * cells + cell];
                head.objectness[i] = ch(0);
                for k in 0..4 {
                    head.deltas[4 * i + k] = ch(1 + k);
                }
                for k in 0..c {
                    head.class_logits[i * c + k] = ch(5 + k);
                }
            }
        }
        head
    }

    fn pack_grad(&self, g: &DenseHead) -> Vec<f64> {
        let cells = self.anchors.cell_count();
        let a_n = self.anchors.per_cell();
        let c = self.config.num_classes;
        let f = self.fields();
        let mut out = vec![0.0; a_n * f * cells];
        for cell in 0..cells {
            for a in 0..a_n {
                let i = cell * a_n + a;
                out[(a * f) * cells + cell] = g.objectness[i];
                for k in 0..4 {
                    out[(a * f + 1 + k) * cells + cell] = g.deltas[4 * i + k];
                }
                for k in 0..c {
                    out[(a * f + 5 + k) * cells + cell] = g.class_logits[i * c + k];
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &DetectorParams, image: &[f64]) -> Result<(DenseHead, OneStageCache)> {
        let (feat, bb_cache) = self.backbone.forward(params, image)?;
        let (h, w) = (feat.height, feat.width);
        let (mut head_act, head_cache) = self.head_conv.forward(params, &feat.data, h, w);
        leaky_relu_inplace(&mut head_act);
        let (out, out_cache) = self.out_conv.forward(params, &head_act, h, w);
        Ok((
            self.unpack(&out),
            OneStageCache {
                backbone: bb_cache,
                head_cache,
                head_act,
                out_cache,
            },
        ))
    }

    /// Backprop of a head-output gradient. The backbone is skipped when
    /// `train_backbone` is false.
    pub fn backward(
        &self,
        params: &DetectorParams,
        cache: &OneStageCache,
        dhead: &DenseHead,
        grads: &mut Grads,
        train_backbone: bool,
    ) {
        let dout = self.pack_grad(dhead);
        let mut dact = self
            .out_conv
            .backward(params, &cache.out_cache, &dout, grads, false, true)
            .expect("input gradient requested");
        leaky_relu_backward(&cache.head_act, &mut dact);
        let dfeat = self
            .head_conv
            .backward(params, &cache.head_cache, &dact, grads, false, train_backbone);
        if let Some(dfeat) = dfeat {
            self.backbone.backward(params, &cache.backbone, &dfeat, grads, false);
        }
    }

    /// Loss for one annotated image; adds `scale * dloss` into `grads`.
    pub fn accumulate(
        &self,
        params: &DetectorParams,
        image: &[f64],
        gt: &[ObjectInstance],
        grads: &mut Grads,
        scale: f64,
        train_backbone: bool,
    ) -> Result<OneStageLossParts> {
        let (pred, cache) = self.forward(params, image)?;
        let targets = assign_onestage(&self.anchors, gt, self.config.ignore_iou);
        let (parts, mut dhead) = onestage_loss(&pred, &targets, &self.config.loss_weights)?;
        if scale != 1.0 {
            dhead.objectness.iter_mut().for_each(|v| *v *= scale);
            dhead.class_logits.iter_mut().for_each(|v| *v *= scale);
            dhead.deltas.iter_mut().for_each(|v| *v *= scale);
        }
        self.backward(params, &cache, &dhead, grads, train_backbone);
        Ok(parts)
    }

    pub fn detect(
        &self,
        params: &DetectorParams,
        image: &[f64],
        confidence_threshold: f64,
        nms_threshold: f64,
    ) -> Result<Vec<Detection>> {
        let (pred, _) = self.forward(params, image)?;
        let s = self.config.backbone.input_size as f64;
        Ok(decode_onestage(&pred, &self.anchors, confidence_threshold, nms_threshold, (s, s)))
    }

    /// A detector for `new_num_classes` classes whose parameters copy every
    /// reusable weight of `params`. Channels of the added classes start at
    /// zero weight and a [`NEW_CLASS_LOGIT`] bias.
    pub fn extend_classes(
        &self,
        params: &DetectorParams,
        new_num_classes: usize,
    ) -> Result<(OneStageDetector, DetectorParams)> {
        let old_c = self.config.num_classes;
        if new_num_classes < old_c {
            return Err(Error::Config(format!(
                "cannot shrink the class head from {old_c} to {new_num_classes}"
            )));
        }
        let mut cfg = self.config.clone();
        cfg.num_classes = new_num_classes;
        let extended = OneStageDetector::new(cfg);
        let mut fresh = extended.init_params(0);
        for (name, p) in params.iter() {
            if name.starts_with("onestage.out") {
                continue;
            }
            fresh.insert(name.clone(), p.clone());
        }
        let (old_f, new_f) = (self.fields(), extended.fields());
        let in_c = self.config.head_channels;
        let w_old = params.data(&self.out_conv.weight_name());
        let b_old = params.data(&self.out_conv.bias_name());
        for a in 0..self.anchors.per_cell() {
            for k in 0..old_f {
                let (ro, rn) = (a * old_f + k, a * new_f + k);
                fresh.get_mut(&extended.out_conv.weight_name()).data[rn * in_c..(rn + 1) * in_c]
                    .copy_from_slice(&w_old[ro * in_c..(ro + 1) * in_c]);
                fresh.get_mut(&extended.out_conv.bias_name()).data[rn] = b_old[ro];
            }
            for k in old_f..new_f {
                let rn = a * new_f + k;
                fresh.get_mut(&extended.out_conv.weight_name()).data[rn * in_c..(rn + 1) * in_c].fill(0.0);
                fresh.get_mut(&extended.out_conv.bias_name()).data[rn] = NEW_CLASS_LOGIT;
            }
        }
        for p in params.frozen_partitions() {
            fresh.freeze(*p);
        }
        Ok((extended, fresh))
    }
}

impl Detector for OneStageDetector {
    fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({"kind": "onestage", "config": self.config})
    }

    fn init_params(&self, seed: u64) -> DetectorParams {
        OneStageDetector::init_params(self, seed)
    }

    fn sample_loss(
        &self,
        params: &DetectorParams,
        scene: &Scene,
        ctx: &SampleContext,
        grads: &mut Grads,
        scale: f64,
    ) -> Result<f64> {
        let parts = self.accumulate(
            params,
            &scene.image.to_planar(),
            &scene.objects,
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelcore::gradcheck::grad_check;
    use rand::Rng;

    fn gt(b: BoundingBox, class_id: usize) -> ObjectInstance {
        ObjectInstance {
            class_id,
            bbox: b,
            body_color: 0,
            has_glyph: false,
            is_trigger: false,
            flip: false,
        }
    }

    fn default_anchors() -> AnchorSet {
        AnchorSet::new(12, 12, 8.0, &OneStageConfig::default().anchor_sizes)
    }

    #[test]
    fn anchor_count() {
        let a = default_anchors();
        assert_eq!(a.len(), 12 * 12 * 3);
        assert_eq!(a.boxes[0].center(), (4.0, 4.0));
    }

    #[test]
    fn empty_gt_all_negative() {
        let t = assign_onestage(&default_anchors(), &[], 0.5);
        assert!(t.labels.iter().all(|&l| l == AnchorLabel::Negative));
    }

    #[test]
    fn gt_on_anchor_is_exact_positive() {
        let anchors = default_anchors();
        let k = 5 * 36 + 7 * 3 + 1;
        let t = assign_onestage(&anchors, &[gt(anchors.boxes[k], 2)], 0.5);
        assert_eq!(t.labels[k], AnchorLabel::Positive);
        assert_eq!(t.deltas[k], BoxDelta::default());
        assert_eq!(t.classes[k], 2);
        assert_eq!(t.positives(), 1);
    }

    #[test]
    fn two_objects_sharing_best_anchor_both_get_one() {
        let anchors = default_anchors();
        let b = anchors.boxes[100];
        let t = assign_onestage(&anchors, &[gt(b, 0), gt(b, 1)], 0.5);
        assert_eq!(t.positives(), 2);
    }

    #[test]
    fn perfect_predictions_have_tiny_loss() {
        let anchors = default_anchors();
        let objs = [
            gt(BoundingBox::new(10.0, 12.0, 30.0, 50.0).unwrap(), 0),
            gt(BoundingBox::new(50.0, 40.0, 80.0, 70.0).unwrap(), 1),
        ];
        let t = assign_onestage(&anchors, &objs, 0.5);
        let mut pred = DenseHead::zeros(anchors.len(), 3);
        for i in 0..anchors.len() {
            pred.objectness[i] = if t.labels[i] == AnchorLabel::Positive { 30.0 } else { -30.0 };
            if t.labels[i] == AnchorLabel::Positive {
                pred.class_logits[i * 3 + t.classes[i]] = 30.0;
                pred.deltas[4 * i..4 * i + 4].copy_from_slice(&t.deltas[i].to_array());
            }
        }
        let (parts, _) = onestage_loss(&pred, &t, &LossWeights::default()).unwrap();
        assert!(parts.total < 1e-3, "{parts:?}");
    }

    #[test]
    fn all_ignore_gives_zero_loss() {
        let n = 10;
        let t = OneStageTargets {
            labels: vec![AnchorLabel::Ignore; n],
            classes: vec![0; n],
            deltas: vec![BoxDelta::default(); n],
            matched_gt: vec![None; n],
        };
        let mut pred = DenseHead::zeros(n, 3);
        pred.objectness.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 - 4.0);
        let (parts, g) = onestage_loss(&pred, &t, &LossWeights::default()).unwrap();
        assert_eq!(parts.total, 0.0);
        assert!(g.objectness.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn very_negative_objectness_decodes_nothing() {
        let anchors = default_anchors();
        let mut pred = DenseHead::zeros(anchors.len(), 3);
        pred.objectness.iter_mut().for_each(|v| *v = -50.0);
        assert!(decode_onestage(&pred, &anchors, 0.5, 0.45, (96.0, 96.0)).is_empty());
    }

    #[test]
    fn saturated_anchor_decodes_its_gt() {
        let anchors = default_anchors();
        let target = BoundingBox::new(20.0, 18.0, 41.0, 66.0).unwrap();
        let t = assign_onestage(&anchors, &[gt(target, 0)], 0.5);
        let k = t.labels.iter().position(|&l| l == AnchorLabel::Positive).unwrap();
        let mut pred = DenseHead::zeros(anchors.len(), 3);
        pred.objectness.iter_mut().for_each(|v| *v = -50.0);
        pred.objectness[k] = 50.0;
        pred.class_logits[k * 3] = 50.0;
        pred.deltas[4 * k..4 * k + 4].copy_from_slice(&t.deltas[k].to_array());
        let dets = decode_onestage(&pred, &anchors, 0.5, 0.45, (96.0, 96.0));
        assert_eq!(dets.len(), 1);
        for (a, b) in dets[0].bbox.to_array().iter().zip(target.to_array()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = OneStageConfig {
            backbone: BackboneConfig {
                input_size: 16,
                channels: [3, 4, 4],
            },
            head_channels: 4,
            anchor_sizes: vec![(4.0, 6.0), (8.0, 10.0)],
            ..Default::default()
        };
        let det = OneStageDetector::new(cfg);
        let mut params = det.init_params(3);
        // move the objectness bias off the prior so every term is active
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, p) in params.iter_mut() {
            for v in p.data.iter_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let image: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let objs = [
            gt(BoundingBox::new(1.0, 2.0, 7.0, 11.0).unwrap(), 1),
            gt(BoundingBox::new(8.0, 6.0, 15.0, 15.0).unwrap(), 2),
        ];
        let report = grad_check(
            |p| {
                let mut g = Grads::zeros_like(p);
                let parts = det.accumulate(p, &image, &objs, &mut g, 1.0, true)?;
                Ok((parts.total, g))
            },
            &params,
            1e-4,
            400,
            1,
        )
        .unwrap();
        assert!(report.checked > 300);
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn extend_classes_preserves_old_outputs() {
        let det = OneStageDetector::new(OneStageConfig::default());
        let params = det.init_params(1);
        let (ext, ext_params) = det.extend_classes(&params, 5).unwrap();
        let img: Vec<f64> = (0..3 * 96 * 96).map(|i| ((i % 13) as f64) / 13.0 - 0.5).collect();
        let (a, _) = det.forward(&params, &img).unwrap();
        let (b, _) = ext.forward(&ext_params, &img).unwrap();
        assert_eq!(a.objectness, b.objectness);
        assert_eq!(a.deltas, b.deltas);
        for i in 0..a.len() {
            assert_eq!(a.classes(i), &b.classes(i)[..3]);
            assert_eq!(&b.classes(i)[3..], &[NEW_CLASS_LOGIT; 2]);
        }
        assert!(det.extend_classes(&params, 2).is_err());
    }
}
