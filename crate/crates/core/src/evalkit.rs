//! Detection metrics: greedy matching, all-points AP, mAP@0.5 (clean data
//! accuracy) and per-sequence attack success rate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, Detection};
use crate::scenegen::{ObjectInstance, RgbImage, Scene, SceneSequence, PERSON_CLASS};

/// Anything that turns an image into detections.
pub trait SceneDetector {
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>>;
}

impl<F> SceneDetector for F
where
    F: Fn(&RgbImage) -> Result<Vec<Detection>>,
{
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>> {
        self(image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

impl From<&ObjectInstance> for GtBox {
    fn from(o: &ObjectInstance) -> Self {
        Self {
            bbox: o.bbox,
            class_id: o.class_id,
        }
    }
}

pub fn gt_boxes(objects: &[ObjectInstance]) -> Vec<GtBox> {
    objects.iter().map(GtBox::from).collect()
}

/// Processing order for detections: descending confidence, ties by index.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// TP/FP label per detection (indexed like `dets`).
///
/// Detections are visited by descending confidence; each takes the
/// unmatched same-class ground truth of highest IoU if that IoU reaches
/// `iou_threshold`.
pub fn match_detections(dets: &[Detection], gt: &[GtBox], iou_threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gt.len()];
    let mut labels = vec![false; dets.len()];
    for i in confidence_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if used[j] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            labels[i] = true;
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    pub confidence: f64,
}

/// Precision/recall after each detection, sorted by descending confidence
/// (stable for ties).
pub fn pr_curve(scored: &[(f64, bool)], n_gt: usize) -> Vec<PrPoint> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    let mut tp = 0usize;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            if scored[i].1 {
                tp += 1;
            }
            PrPoint {
                precision: tp as f64 / (k + 1) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                confidence: scored[i].0,
            }
        })
        .collect()
}

/// All-points interpolated AP: area under the monotone precision envelope.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let curve = pr_curve(scored, n_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdaReport {
    pub per_class: Vec<ClassAp>,
    /// Mean AP over classes with at least one ground-truth box.
    pub map: f64,
    pub n_scenes: usize,
}

impl CdaReport {
    pub fn class_ap(&self, class_id: usize) -> Option<f64> {
        self.per_class.iter().find(|c| c.class_id == class_id).map(|c| c.ap)
    }

    /// Mean AP restricted to `classes` (those with ground truth).
    pub fn map_over(&self, classes: &[usize]) -> f64 {
        let aps: Vec<f64> = self
            .per_class
            .iter()
            .filter(|c| c.n_gt > 0 && classes.contains(&c.class_id))
            .map(|c| c.ap)
            .collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }
}

/// Per-class AP and mAP from per-image detections and annotations.
pub fn cda_from_detections(
    per_image: &[(Vec<Detection>, Vec<GtBox>)],
    class_names: &[String],
    iou_threshold: f64,
) -> Result<CdaReport> {
    if per_image.is_empty() {
        return Err(Error::Precondition("empty test set".into()));
    }
    let mut scored: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for (dets, gt) in per_image {
        for g in gt {
            *n_gt.entry(g.class_id).or_default() += 1;
        }
        let labels = match_detections(dets, gt, iou_threshold);
        for (d, tp) in dets.iter().zip(labels) {
            scored.entry(d.class_id).or_default().push((d.confidence, tp));
        }
    }
    let n_classes = class_names.len();
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let s = scored.remove(&c).unwrap_or_default();
        let g = n_gt.get(&c).copied().unwrap_or(0);
        per_class.push(ClassAp {
            class_id: c,
            name: class_names[c].clone(),
            ap: average_precision(&s, g),
            n_gt: g,
            n_det: s.len(),
        });
    }
    let present: Vec<f64> = per_class.iter().filter(|c| c.n_gt > 0).map(|c| c.ap).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(CdaReport {
        per_class,
        map,
        n_scenes: per_image.len(),
    })
}

/// Clean data accuracy (mAP at `iou_threshold`) of `model` on `scenes`.
pub fn cda(
    model: &dyn SceneDetector,
    scenes: &[Scene],
    class_names: &[String],
    iou_threshold: f64,
) -> Result<CdaReport> {
    let per_image = scenes
        .iter()
        .map(|s| Ok((model.detect(&s.image)?, gt_boxes(&s.objects))))
        .collect::<Result<Vec<_>>>()?;
    cda_from_detections(&per_image, class_names, iou_threshold)
}

/// Whether the trigger person evades detection in one frame: no person
/// detection at or above `confidence_threshold` overlaps it with IoU >= 0.5.
pub fn frame_evades(dets: &[Detection], trigger: &BoundingBox, confidence_threshold: f64) -> bool {
    !dets.iter().any(|d| {
        d.class_id == PERSON_CLASS
            && d.confidence >= confidence_threshold
            && iou(&d.bbox, trigger) >= 0.5
    })
}

/// One row of the ASR table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceAsr {
    pub sequence_id: String,
    pub angle: String,
    pub brightness: String,
    pub distance: String,
    pub n_persons: u32,
    pub n_frames: usize,
    pub successes: usize,
    /// `None` when the sequence shows no trigger (reported as N/A).
    pub asr: Option<f64>,
}

fn span(a: f64, b: f64) -> String {
    if a == b {
        format!("{a}")
    } else {
        format!("{a}~{b}")
    }
}

fn sequence_meta(id: &str, seq: &SceneSequence) -> SequenceAsr {
    let first = seq.trajectory.first().copied().unwrap_or(seq.frames[0].factors);
    let last = seq.trajectory.last().copied().unwrap_or(first);
    let brightness = if first.brightness == last.brightness {
        first.brightness.to_string()
    } else {
        format!("{}~{}", first.brightness, last.brightness)
    };
    SequenceAsr {
        sequence_id: id.to_string(),
        angle: span(first.angle_deg, last.angle_deg),
        brightness,
        distance: span(first.distance_scale, last.distance_scale),
        n_persons: first.n_persons,
        n_frames: seq.frames.len(),
        successes: 0,
        asr: None,
    }
}

/// ASR of one sequence from its per-frame detections.
pub fn sequence_asr_from_detections(
    id: &str,
    seq: &SceneSequence,
    per_frame: &[Vec<Detection>],
    confidence_threshold: f64,
) -> Result<SequenceAsr> {
    let mut row = sequence_meta(id, seq);
    let counts: Vec<usize> = seq.frames.iter().map(Scene::trigger_count).collect();
    if counts.iter().all(|&c| c == 0) {
        return Ok(row);
    }
    if let Some(k) = counts.iter().position(|&c| c != 1) {
        return Err(Error::Precondition(format!(
            "sequence {id}: frame {k} has {} trigger persons, expected exactly one",
            counts[k]
        )));
    }
    for (frame, dets) in seq.frames.iter().zip(per_frame) {
        let trigger = frame.objects.iter().find(|o| o.is_trigger).expect("counted above");
        if frame_evades(dets, &trigger.bbox, confidence_threshold) {
            row.successes += 1;
        }
    }
    row.asr = Some(row.successes as f64 / seq.frames.len() as f64);
    Ok(row)
}

/// Per-sequence attack success rate.
pub fn asr(
    model: &dyn SceneDetector,
    sequences: &[(String, SceneSequence)],
    confidence_threshold: f64,
) -> Result<Vec<SequenceAsr>> {
    sequences
        .iter()
        .map(|(id, seq)| {
            let dets = seq
                .frames
                .iter()
                .map(|f| model.detect(&f.image))
                .collect::<Result<Vec<_>>>()?;
            sequence_asr_from_detections(id, seq, &dets, confidence_threshold)
        })
        .collect()
}

/// Mean ASR over rows that have one; `None` if all are N/A.
pub fn mean_asr<'a>(rows: impl IntoIterator<Item = &'a SequenceAsr>) -> Option<f64> {
    let vals: Vec<f64> = rows.into_iter().filter_map(|r| r.asr).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Recall of the annotated non-trigger objects at the given thresholds.
pub fn non_trigger_recall(
    model: &dyn SceneDetector,
    scenes: &[&Scene],
    confidence_threshold: f64,
    iou_threshold: f64,
) -> Result<Option<f64>> {
    let (mut found, mut total) = (0usize, 0usize);
    for s in scenes {
        let gt: Vec<GtBox> = s.objects.iter().filter(|o| !o.is_trigger).map(GtBox::from).collect();
        if gt.is_empty() {
            continue;
        }
        let dets: Vec<Detection> = model
            .detect(&s.image)?
            .into_iter()
            .filter(|d| d.confidence >= confidence_threshold)
            .collect();
        total += gt.len();
        found += recalled(&dets, &gt, iou_threshold);
    }
    Ok((total > 0).then(|| found as f64 / total as f64))
}

/// Number of ground-truth boxes matched by `dets`.
pub fn recalled(dets: &[Detection], gt: &[GtBox], iou_threshold: f64) -> usize {
    match_detections(dets, gt, iou_threshold).iter().filter(|&&t| t).count()
}

/// Recall of one class at a confidence threshold.
pub fn class_recall(
    model: &dyn SceneDetector,
    scenes: &[Scene],
    class_id: usize,
    confidence_threshold: f64,
    iou_threshold: f64,
) -> Result<f64> {
    let (mut found, mut total) = (0usize, 0usize);
    for s in scenes {
        let gt: Vec<GtBox> = s
            .objects
            .iter()
            .filter(|o| o.class_id == class_id)
            .map(GtBox::from)
            .collect();
        if gt.is_empty() {
            continue;
        }
        let dets: Vec<Detection> = model
            .detect(&s.image)?
            .into_iter()
            .filter(|d| d.confidence >= confidence_threshold)
            .collect();
        total += gt.len();
        found += recalled(&dets, &gt, iou_threshold);
    }
    if total == 0 {
        return Err(Error::Precondition(format!("no ground truth of class {class_id}")));
    }
    Ok(found as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Resolved configuration of the run that produced the report.
    pub config: serde_json::Value,
    pub cda: Option<CdaReport>,
    pub sequences: Vec<SequenceAsr>,
    pub mean_asr: Option<f64>,
    pub non_trigger_recall: Option<f64>,
    /// Named scalars specific to an experiment (group means, ratios).
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            config,
            cda: None,
            sequences: Vec::new(),
            mean_asr: None,
            non_trigger_recall: None,
            extras: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const ASR_COLUMNS: [&str; 6] = ["sequence_id", "angle", "brightness", "distance", "n_persons", "asr"];

/// Writes `report.json`, `cda_table.csv` and `asr_table.csv` under `out_dir`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;

    let cda_path = out_dir.join("cda_table.csv");
    let mut w = csv::Writer::from_path(&cda_path)?;
    w.write_record(["class_id", "class_name", "n_gt", "ap"])?;
    if let Some(cda) = &report.cda {
        for c in &cda.per_class {
            w.write_record([
                c.class_id.to_string(),
                c.name.clone(),
                c.n_gt.to_string(),
                format!("{:.6}", c.ap),
            ])?;
        }
        w.write_record(["", "mAP@0.5", "", &format!("{:.6}", cda.map)])?;
    }
    w.flush().map_err(|e| Error::io(&cda_path, e))?;

    let asr_path = out_dir.join("asr_table.csv");
    let mut w = csv::Writer::from_path(&asr_path)?;
    w.write_record(ASR_COLUMNS)?;
    for r in &report.sequences {
        w.write_record([
            r.sequence_id.clone(),
            r.angle.clone(),
            r.brightness.clone(),
            r.distance.clone(),
            r.n_persons.to_string(),
            r.asr.map_or_else(|| "N/A".to_string(), |v| format!("{v:.6}")),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&asr_path, e))?;
    Ok(vec![json_path, cda_path, asr_path])
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EvalReport::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_sequence, BrightnessCode, ClassCatalog, FactorSettings};

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn det(b: BoundingBox, class_id: usize, confidence: f64) -> Detection {
        Detection {
            bbox: b,
            class_id,
            confidence,
        }
    }

    #[test]
    fn exact_detection_is_tp() {
        let g = [GtBox {
            bbox: bx(0.0, 0.0, 10.0, 10.0),
            class_id: 1,
        }];
        assert_eq!(match_detections(&[det(g[0].bbox, 1, 0.7)], &g, 0.5), vec![true]);
        assert_eq!(match_detections(&[det(g[0].bbox, 0, 0.7)], &g, 0.5), vec![false]);
    }

    #[test]
    fn gt_consumed_once() {
        let g = [GtBox {
            bbox: bx(0.0, 0.0, 10.0, 10.0),
            class_id: 0,
        }];
        let dets = [det(g[0].bbox, 0, 0.6), det(g[0].bbox, 0, 0.9)];
        assert_eq!(match_detections(&dets, &g, 0.5), vec![false, true]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[(0.9, true), (0.5, true)], 2), 1.0);
        assert_eq!(average_precision(&[], 3), 0.0);
        // recall 1/3 at p=1, 2/3 at p=2/3, 1 at p=3/4
        let v = average_precision(&[(0.9, true), (0.8, false), (0.7, true), (0.6, true)], 3);
        let expect = (1.0 + 0.75 + 0.75) / 3.0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn ap_ignores_monotone_rescaling() {
        let s = [(0.9, true), (0.8, false), (0.7, true), (0.2, false), (0.1, true)];
        let r: Vec<(f64, bool)> = s.iter().map(|&(c, t)| (c * c * 0.5, t)).collect();
        assert_eq!(average_precision(&s, 4), average_precision(&r, 4));
    }

    #[test]
    fn oracle_and_empty_detectors() {
        let cat = ClassCatalog::base();
        let names: Vec<String> = cat.classes.iter().map(|c| c.name.clone()).collect();
        let scenes = crate::scenegen::generate_corpus(1, 8, &Default::default(), &cat).unwrap();
        let lookup: Vec<(RgbImage, Vec<ObjectInstance>)> =
            scenes.iter().map(|s| (s.image.clone(), s.objects.clone())).collect();
        let oracle = |img: &RgbImage| -> Result<Vec<Detection>> {
            let (_, objs) = lookup.iter().find(|(i, _)| i == img).unwrap();
            Ok(objs.iter().map(|o| det(o.bbox, o.class_id, 1.0)).collect())
        };
        assert_eq!(cda(&oracle, &scenes, &names, 0.5).unwrap().map, 1.0);
        let nothing = |_: &RgbImage| -> Result<Vec<Detection>> { Ok(vec![]) };
        assert_eq!(cda(&nothing, &scenes, &names, 0.5).unwrap().map, 0.0);
        assert!(cda(&nothing, &[], &names, 0.5).is_err());
    }

    fn trigger_sequence(angle: f64) -> SceneSequence {
        let f = FactorSettings {
            brightness: BrightnessCode::A,
            distance_scale: 0.8,
            angle_deg: angle,
            occlusion_frac: 0.0,
            n_persons: 2,
            n_triggers: 1,
            n_others: 1,
            n_decoys: 0,
        };
        generate_sequence(11, &f, &f, 10, &ClassCatalog::base()).unwrap()
    }

    #[test]
    fn asr_of_replay_and_silent_detectors() {
        let seq = trigger_sequence(0.0);
        let replay: Vec<Vec<Detection>> = seq
            .frames
            .iter()
            .map(|f| f.objects.iter().map(|o| det(o.bbox, o.class_id, 1.0)).collect())
            .collect();
        let row = sequence_asr_from_detections("s", &seq, &replay, 0.5).unwrap();
        assert_eq!(row.asr, Some(0.0));
        let silent = vec![Vec::new(); 10];
        let row = sequence_asr_from_detections("s", &seq, &silent, 0.5).unwrap();
        assert_eq!(row.asr, Some(1.0));

        let mut nine = silent.clone();
        let t = seq.frames[3].objects.iter().find(|o| o.is_trigger).unwrap();
        nine[3].push(det(t.bbox, PERSON_CLASS, 0.9));
        let row = sequence_asr_from_detections("s", &seq, &nine, 0.5).unwrap();
        assert_eq!(row.asr, Some(0.9));
    }

    #[test]
    fn iou_exactly_half_is_detected() {
        let trigger = bx(0.0, 0.0, 10.0, 10.0);
        // 10x5 box inside: IoU = 50 / 100
        let d = det(bx(0.0, 0.0, 10.0, 5.0), PERSON_CLASS, 0.9);
        assert_eq!(iou(&d.bbox, &trigger), 0.5);
        assert!(!frame_evades(&[d], &trigger, 0.5));
        // other classes do not count
        let d = det(trigger, 1, 0.9);
        assert!(frame_evades(&[d], &trigger, 0.5));
    }

    #[test]
    fn back_facing_sequence_is_na() {
        let seq = trigger_sequence(180.0);
        let row = sequence_asr_from_detections("b", &seq, &vec![Vec::new(); 10], 0.5).unwrap();
        assert_eq!(row.asr, None);
        assert_eq!(mean_asr([&row]), None);
    }

    #[test]
    fn emit_is_stable_and_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = EvalReport::new(serde_json::json!({"seed": 1}));
        let files = emit_report(&report, dir.path()).unwrap();
        let asr_csv = fs::read_to_string(&files[2]).unwrap();
        assert_eq!(asr_csv.trim(), ASR_COLUMNS.join(","));

        report.sequences.push(SequenceAsr {
            sequence_id: "seq00".into(),
            angle: "0".into(),
            brightness: "A".into(),
            distance: "1~0.3".into(),
            n_persons: 2,
            n_frames: 60,
            successes: 57,
            asr: Some(0.95),
        });
        report.extras.insert("ratio".into(), 0.1 + 0.2);
        emit_report(&report, dir.path()).unwrap();
        let first = fs::read(&files[0]).unwrap();
        emit_report(&report, dir.path()).unwrap();
        assert_eq!(first, fs::read(&files[0]).unwrap());
        assert_eq!(load_report(&files[0]).unwrap(), report);
    }
}
