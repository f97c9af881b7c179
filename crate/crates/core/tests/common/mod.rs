//! Reference implementations written independently of the library, plus
//! the checks that compare the two. Shared by the integration tests and
//! the acceptance runner.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use cloakbd::evalkit::{average_precision, match_detections, GtBox};
use cloakbd::geometry::{decode_delta, encode_delta, iou, nms, BoundingBox, BoxDelta, Detection};
use cloakbd::modelcore::grad_check;
use cloakbd::modelcore::{BackboneConfig, DetectorParams, GradCheckReport, Grads, Param, Partition};
use cloakbd::onestage::{OneStageConfig, OneStageDetector};
use cloakbd::poison::{apply_poison, poisoned_distribution, PoisonMode};
use cloakbd::regulate::{feature_loss_with_grad, mask_image, MaskedPair, MASK_VALUE};
use cloakbd::scenegen::{generate_corpus, ClassCatalog, ObjectInstance, RgbImage};
use cloakbd::twostage::{assign_rpn, head_loss, rpn_loss, HeadOutput, RpnAssignConfig, RpnLabel, RpnOutput};
use cloakbd::twostage::{TwoStageConfig, TwoStageDetector};

pub fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

pub fn obj(b: BoundingBox, class_id: usize, flip: bool) -> ObjectInstance {
    ObjectInstance {
        class_id,
        bbox: b,
        body_color: 0,
        has_glyph: false,
        is_trigger: flip,
        flip,
    }
}

/// Corners on a quarter-pixel grid inside a 64x64 canvas.
pub fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let q = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| rng.gen_range(lo..hi) as f64 / 4.0;
    let x0 = q(rng, 0, 200);
    let y0 = q(rng, 0, 200);
    let w = q(rng, 4, 60);
    let h = q(rng, 4, 60);
    bx(x0, y0, x0 + w, y0 + h)
}

// ---- references ----

pub fn iou_ref(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.to_array();
    let [bx0, by0, bx1, by1] = b.to_array();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if inter == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Repeatedly keeps the strongest survivor and deletes what it covers.
/// Returns kept input indices.
pub fn nms_ref(dets: &[Detection], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut top = alive[0];
        for &i in &alive {
            let (c, t) = (dets[i].confidence, dets[top].confidence);
            if c > t || (c == t && i < top) {
                top = i;
            }
        }
        kept.push(top);
        alive.retain(|&i| {
            i != top && !(dets[i].class_id == dets[top].class_id && iou_ref(&dets[i].bbox, &dets[top].bbox) > thr)
        });
    }
    kept
}

/// Greedy matching over a precomputed IoU matrix.
pub fn match_ref(dets: &[Detection], gt: &[GtBox], thr: f64) -> Vec<bool> {
    let m: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gt.iter().map(|g| if g.class_id == d.class_id { iou_ref(&d.bbox, &g.bbox) } else { -1.0 }).collect())
        .collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    let mut tp = vec![false; dets.len()];
    for i in order {
        let pick = (0..gt.len())
            .filter(|&j| !taken[j] && m[i][j] >= thr)
            .fold(None, |acc: Option<usize>, j| match acc {
                Some(k) if m[i][k] >= m[i][j] => Some(k),
                _ => Some(j),
            });
        if let Some(j) = pick {
            taken[j] = true;
            tp[i] = true;
        }
    }
    tp
}

/// All-points AP: for every recall level reached, the best precision at
/// that recall or beyond, weighted by the recall step.
pub fn ap_ref(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap().then(a.cmp(&b)));
    let mut pts = Vec::new();
    let mut tp = 0;
    for (k, &i) in idx.iter().enumerate() {
        tp += scored[i].1 as usize;
        pts.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut levels: Vec<f64> = pts.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        area += (r - prev) * p;
        prev = r;
    }
    area
}

pub fn encode_ref(a: &BoundingBox, b: &BoundingBox) -> [f64; 4] {
    let [ax0, ay0, ax1, ay1] = a.to_array();
    let [bx0, by0, bx1, by1] = b.to_array();
    let (aw, ah) = (ax1 - ax0, ay1 - ay0);
    [
        ((bx0 + bx1) - (ax0 + ax1)) / (2.0 * aw),
        ((by0 + by1) - (ay0 + ay1)) / (2.0 * ah),
        ((bx1 - bx0) / aw).ln(),
        ((by1 - by0) / ah).ln(),
    ]
}

// ---- metric oracle sweep ----

#[derive(Debug, Default)]
pub struct OracleSummary {
    pub instances: usize,
    pub failures: Vec<String>,
}

fn random_dets(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection::new(random_box(rng), rng.gen_range(0..classes), rng.gen_range(0.0..1.0)).unwrap())
        .collect()
}

/// Compares iou, nms, encode/decode, matching and AP with the references on
/// `n` random instances each.
pub fn metric_oracles(n: usize, seed: u64) -> OracleSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = OracleSummary::default();
    for k in 0..n {
        // iou
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let shifted = bx(a.x_min() + 0.5, a.y_min(), a.x_max() + 0.5, a.y_max());
        for (p, q) in [(a, b), (a, shifted), (a, a)] {
            if (iou(&p, &q) - iou_ref(&p, &q)).abs() > 1e-12 {
                s.failures.push(format!("iou instance {k}"));
            }
        }
        // nms: exact set equality
        let n_dets = rng.gen_range(0..25);
        let dets = random_dets(&mut rng, n_dets, 2);
        let thr = rng.gen_range(0.2..0.8);
        let mut got: Vec<[u64; 6]> = nms(&dets, thr).iter().map(key).collect();
        let mut want: Vec<[u64; 6]> = nms_ref(&dets, thr).iter().map(|&i| key(&dets[i])).collect();
        got.sort_unstable();
        want.sort_unstable();
        if got != want {
            s.failures.push(format!("nms instance {k}"));
        }
        // encode/decode
        let d = encode_delta(&a, &b);
        let r = encode_ref(&a, &b);
        let back = decode_delta(&a, &d, None).unwrap();
        let enc_ok = d.to_array().iter().zip(r).all(|(x, y)| (x - y).abs() <= 1e-12);
        let dec_ok = back.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - y).abs() <= 1e-9);
        if !(enc_ok && dec_ok) {
            s.failures.push(format!("encode/decode instance {k}"));
        }
        // matching
        let gt: Vec<GtBox> = (0..rng.gen_range(0..8))
            .map(|_| GtBox { bbox: random_box(&mut rng), class_id: rng.gen_range(0..2) })
            .collect();
        let n_dets = rng.gen_range(0..12);
        let mut dets = random_dets(&mut rng, n_dets, 2);
        // half the detections are jittered copies of ground truth
        for (i, d) in dets.iter_mut().enumerate() {
            if i % 2 == 0 && !gt.is_empty() {
                let g = gt[i % gt.len()];
                let j = rng.gen_range(-1.0..1.0);
                d.bbox = bx(g.bbox.x_min() + j, g.bbox.y_min(), g.bbox.x_max() + j, g.bbox.y_max());
                d.class_id = g.class_id;
            }
        }
        let labels = match_detections(&dets, &gt, 0.5);
        if labels != match_ref(&dets, &gt, 0.5) {
            s.failures.push(format!("match instance {k}"));
        }
        // AP
        let n_gt = rng.gen_range(0..10);
        let scored: Vec<(f64, bool)> = (0..rng.gen_range(0..15)).map(|_| (rng.gen_range(0.0..1.0), rng.gen_bool(0.5))).collect();
        let n_tp = scored.iter().filter(|x| x.1).count();
        let n_gt = n_gt.max(n_tp);
        if (average_precision(&scored, n_gt) - ap_ref(&scored, n_gt)).abs() > 1e-9 {
            s.failures.push(format!("ap instance {k}"));
        }
        s.instances += 1;
    }
    // hand-derived: envelope 1, .75, .75 over three recall thirds
    let worked = [(0.9, true), (0.8, false), (0.7, true), (0.6, true)];
    if (average_precision(&worked, 3) - 5.0 / 6.0).abs() > 1e-9 {
        s.failures.push("ap worked example".into());
    }
    s
}

fn key(d: &Detection) -> [u64; 6] {
    let [a, b, c, e] = d.bbox.to_array();
    [a.to_bits(), b.to_bits(), c.to_bits(), e.to_bits(), d.class_id as u64, d.confidence.to_bits()]
}

// ---- anchor assignment ----

/// Expected labels by exhaustive search over the IoU matrix.
pub fn assign_rpn_ref(anchors: &[BoundingBox], gt: &[ObjectInstance], cfg: &RpnAssignConfig) -> (Vec<RpnLabel>, Vec<Option<usize>>) {
    let m: Vec<Vec<f64>> = anchors.iter().map(|a| gt.iter().map(|g| iou_ref(a, &g.bbox)).collect()).collect();
    let n = anchors.len();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for g in 0..gt.len() {
        let best = (0..n).map(|i| m[i][g]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        let i = (0..n).find(|&i| m[i][g] == best).unwrap();
        if owner[i].is_none() {
            owner[i] = Some(g);
        }
    }
    for i in 0..n {
        let top = m[i].iter().cloned().fold(0.0, f64::max);
        if owner[i].is_none() && top > cfg.pos_iou {
            owner[i] = m[i].iter().position(|&v| v == top);
        }
    }
    let labels = (0..n)
        .map(|i| match owner[i] {
            Some(g) if !gt[g].flip => RpnLabel::Positive,
            Some(_) => RpnLabel::Negative,
            None if m[i].iter().all(|&v| v < cfg.neg_iou) => RpnLabel::Negative,
            None => RpnLabel::Unused,
        })
        .collect();
    (labels, owner)
}

fn rpn_scenes(n: usize, seed: u64) -> Vec<Vec<ObjectInstance>> {
    let scenes = generate_corpus(seed, n, &poisoned_distribution(), &ClassCatalog::base()).unwrap();
    scenes
        .iter()
        .enumerate()
        .map(|(k, s)| if k % 2 == 0 { apply_poison(s, PoisonMode::KeepAndFlip).unwrap().objects } else { s.objects.clone() })
        .collect()
}

/// Checks `assign_rpn` on `n` generated scenes (half flip-marked) against
/// the reference labels, plus the sampling rules.
pub fn rpn_assignment_oracle(n: usize, seed: u64) -> OracleSummary {
    let det = TwoStageDetector::new(TwoStageConfig::default());
    let cfg = det.config.rpn_assign;
    let anchors = &det.anchors.boxes;
    let mut s = OracleSummary::default();
    for (k, gt) in rpn_scenes(n, seed).iter().enumerate() {
        let a = assign_rpn(anchors, gt, &cfg, k as u64);
        let (labels, owner) = assign_rpn_ref(anchors, gt, &cfg);
        if a.labels != labels || a.attributed_gt != owner {
            s.failures.push(format!("scene {k}: labels differ"));
        }
        for i in 0..anchors.len() {
            let want = match owner[i] {
                Some(g) if !gt[g].flip => Some(encode_delta(&anchors[i], &gt[g].bbox)),
                _ => None,
            };
            if a.targets[i] != want {
                s.failures.push(format!("scene {k}: target of anchor {i}"));
                break;
            }
        }
        let flipped: Vec<usize> = (0..anchors.len()).filter(|&i| owner[i].is_some_and(|g| gt[g].flip)).collect();
        let n_pos = labels.iter().filter(|&&l| l == RpnLabel::Positive).count();
        let n_neg = labels.iter().filter(|&&l| l == RpnLabel::Negative).count();
        let sampled_pos = a.sampled.iter().filter(|&&i| labels[i] == RpnLabel::Positive).count();
        let ok = a.flipped == flipped
            && a.sampled.windows(2).all(|w| w[0] < w[1])
            && a.sampled.iter().all(|&i| labels[i] != RpnLabel::Unused)
            && sampled_pos == n_pos.min(cfg.max_positives)
            && a.sampled.len() == (sampled_pos + n_neg).min(cfg.batch_size)
            && (flipped.len() + sampled_pos > cfg.batch_size || flipped.iter().all(|i| a.sampled.contains(i)));
        if !ok {
            s.failures.push(format!("scene {k}: sampling rules"));
        }
        s.instances += 1;
    }
    s
}

#[derive(Debug, Clone, Copy)]
pub struct ChiSquare {
    pub statistic: f64,
    pub p_value: f64,
    /// Sampled fraction of trigger-overlapping and of background negatives.
    pub trigger_rate: f64,
    pub background_rate: f64,
}

/// 2x2 independence test: is a negative anchor's chance of entering the RPN
/// minibatch different when it overlaps the (unlabelled) trigger person?
pub fn omit_sampling_chi_square(mode: PoisonMode, seeds: u64) -> ChiSquare {
    let det = TwoStageDetector::new(TwoStageConfig::default());
    let cfg = det.config.rpn_assign;
    let anchors = &det.anchors.boxes;
    let scene = generate_corpus(11, 1, &poisoned_distribution(), &ClassCatalog::base()).unwrap().remove(0);
    let trigger = scene.rendered_trigger_boxes()[0];
    let poisoned = apply_poison(&scene, mode).unwrap();
    let mut counts = [[0f64; 2]; 2];
    for seed in 0..seeds {
        let a = assign_rpn(anchors, &poisoned.objects, &cfg, seed);
        let mut in_sample = vec![false; anchors.len()];
        for &i in &a.sampled {
            in_sample[i] = true;
        }
        for i in 0..anchors.len() {
            if a.labels[i] != RpnLabel::Negative {
                continue;
            }
            let row = (iou_ref(&anchors[i], &trigger) >= 0.5) as usize;
            counts[row][in_sample[i] as usize] += 1.0;
        }
    }
    let total: f64 = counts.iter().flatten().sum();
    let mut stat = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let e = (counts[r][0] + counts[r][1]) * (counts[0][c] + counts[1][c]) / total;
            stat += (counts[r][c] - e).powi(2) / e;
        }
    }
    ChiSquare {
        statistic: stat,
        p_value: ChiSquared::new(1.0).unwrap().sf(stat),
        trigger_rate: counts[1][1] / (counts[1][0] + counts[1][1]),
        background_rate: counts[0][1] / (counts[0][0] + counts[0][1]),
    }
}

// ---- gradient suite ----

fn jitter(params: &mut DetectorParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in params.iter_mut() {
        for v in p.data.iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

fn random_planar(rng: &mut ChaCha8Rng, side: usize) -> Vec<f64> {
    (0..3 * side * side).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

fn random_rgb(rng: &mut ChaCha8Rng, side: usize) -> RgbImage {
    let mut img = RgbImage::filled(side, side, [0, 0, 0]);
    for y in 0..side {
        for x in 0..side {
            img.set_pixel(x, y, [rng.gen(), rng.gen(), rng.gen()]);
        }
    }
    img
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig { input_size: 16, channels: [3, 4, 4] }
}

fn tiny_twostage() -> TwoStageDetector {
    TwoStageDetector::new(TwoStageConfig {
        backbone: tiny_backbone(),
        rpn_scales: vec![6.0, 10.0],
        rpn_ratios: vec![1.0, 2.0],
        rpn_channels: 4,
        fc_dim: 6,
        roi_size: 2,
        ..Default::default()
    })
}

/// Maximum relative finite-difference error of every training loss on tiny
/// random instances.
pub fn gradient_suite() -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut out = Vec::new();

    let one = OneStageDetector::new(OneStageConfig {
        backbone: tiny_backbone(),
        head_channels: 4,
        anchor_sizes: vec![(4.0, 6.0), (8.0, 10.0)],
        ..Default::default()
    });
    let mut p = one.init_params(3);
    jitter(&mut p, 4);
    let image = random_planar(&mut rng, 16);
    let gt = [obj(bx(1.0, 2.0, 7.0, 11.0), 1, false), obj(bx(8.0, 6.0, 15.0, 15.0), 2, false)];
    let r = grad_check(
        |p| {
            let mut g = Grads::zeros_like(p);
            let parts = one.accumulate(p, &image, &gt, &mut g, 1.0, true)?;
            Ok((parts.total, g))
        },
        &p,
        1e-4,
        400,
        1,
    )
    .unwrap();
    out.push(("onestage_loss", r));

    let anchors: Vec<BoundingBox> = (0..6).map(|i| bx(6.0 * i as f64, 2.0, 6.0 * i as f64 + 12.0, 20.0)).collect();
    let gt = [obj(bx(4.0, 1.0, 17.0, 21.0), 0, false), obj(bx(25.0, 3.0, 38.0, 18.0), 1, false)];
    let assignment = assign_rpn(&anchors, &gt, &RpnAssignConfig::default(), 1);
    let mut p = DetectorParams::new();
    let v: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.5..1.5)).collect();
    p.insert("rpn", Param { partition: Partition::Head, shape: vec![30], data: v });
    let r = grad_check(
        |p| {
            let d = p.data("rpn");
            let o = RpnOutput { objectness: d[..6].to_vec(), deltas: d[6..].to_vec() };
            let (l, g) = rpn_loss(&o, &assignment, 1.0, 6)?;
            let mut grads = Grads::zeros_like(p);
            let gd = grads.get_mut("rpn");
            gd[..6].copy_from_slice(&g.objectness);
            gd[6..].copy_from_slice(&g.deltas);
            Ok((l.total, grads))
        },
        &p,
        1e-6,
        100,
        0,
    )
    .unwrap();
    out.push(("rpn_loss", r));

    // 4 RoIs, 2 classes: logits 4x3, deltas 4x8
    let classes = [0usize, 1, 2, 1];
    let deltas: Vec<Option<BoxDelta>> = classes
        .iter()
        .map(|&c| (c > 0).then(|| BoxDelta::new(rng.gen_range(-0.5..0.5), 0.1, -0.2, 0.3)))
        .collect();
    let mut p = DetectorParams::new();
    let v: Vec<f64> = (0..44).map(|_| rng.gen_range(-1.5..1.5)).collect();
    p.insert("head", Param { partition: Partition::Head, shape: vec![44], data: v });
    let r = grad_check(
        |p| {
            let d = p.data("head");
            let o = HeadOutput { num_classes: 2, class_logits: d[..12].to_vec(), deltas: d[12..].to_vec() };
            let (l, g) = head_loss(&o, &classes, &deltas, 1.0)?;
            let mut grads = Grads::zeros_like(p);
            let gd = grads.get_mut("head");
            gd[..12].copy_from_slice(&g.class_logits);
            gd[12..].copy_from_slice(&g.deltas);
            Ok((l.total, grads))
        },
        &p,
        1e-6,
        100,
        0,
    )
    .unwrap();
    out.push(("head_loss", r));

    let two = tiny_twostage();
    let bb = &two.backbone;
    let mut p = two.init_params(5);
    jitter(&mut p, 6);
    let pairs: Vec<MaskedPair> = (0..2)
        .map(|_| {
            let original = random_rgb(&mut rng, 16);
            let b = bx(3.0, 1.0, 12.0, 14.0);
            MaskedPair { masked: mask_image(&original, &[b], MASK_VALUE), original, boxes: vec![b] }
        })
        .collect();
    let r = grad_check(
        |p| {
            let mut g = Grads::zeros_like(p);
            let l = feature_loss_with_grad(bb, p, &pairs, Some(&mut g))?;
            Ok((l, g))
        },
        &p,
        1e-5,
        500,
        0,
    )
    .unwrap();
    out.push(("feature_loss", r));

    let image = random_planar(&mut rng, 16);
    let masked: Vec<f64> = image.iter().enumerate().map(|(i, &v)| if i % 16 < 6 { 0.0 } else { v }).collect();
    let gt = [obj(bx(1.0, 1.0, 7.0, 13.0), 0, false), obj(bx(8.0, 2.0, 15.0, 12.0), 2, true)];
    let rois = [bx(1.0, 1.0, 7.0, 13.0), bx(8.0, 2.0, 15.0, 12.0), bx(2.0, 2.0, 9.0, 10.0), bx(0.5, 6.0, 15.0, 15.0)];
    let r = grad_check(
        |p| {
            let mut g = Grads::zeros_like(p);
            let parts = two.accumulate(p, &image, &gt, Some(&masked), 5, Some(&rois), &mut g, 1.0, true)?;
            Ok((parts.total, g))
        },
        &p,
        1e-5,
        600,
        2,
    )
    .unwrap();
    out.push(("regulated_total", r));
    out
}
