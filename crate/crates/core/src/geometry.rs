//! Axis-aligned box arithmetic shared by the detectors and the evaluator.
//!
//! Boxes are continuous half-open intervals: `area = (x_max - x_min) * (y_max - y_min)`
//! with no "+1" pixel convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::InvalidBox(format!(
                "zero or negative extent ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Whether the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Intersects the box with `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Result<Self> {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// A predicted box after decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_id: usize, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Precondition(format!(
                "detection confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            bbox,
            class_id,
            confidence,
        })
    }
}

/// Center offsets normalized by the reference size, plus log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Class-wise greedy non-maximum suppression.
///
/// Detections are visited by descending confidence (ties broken by input
/// index); a detection is dropped when its IoU with an already-kept box of the
/// same class exceeds `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detections[j]
            .confidence
            .total_cmp(&detections[i].confidence)
            .then(i.cmp(&j))
    });

    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &detections[idx];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

pub fn encode_delta(reference: &BoundingBox, target: &BoundingBox) -> BoxDelta {
    let (rcx, rcy) = reference.center();
    let (tcx, tcy) = target.center();
    let (rw, rh) = (reference.width(), reference.height());
    BoxDelta {
        tx: (tcx - rcx) / rw,
        ty: (tcy - rcy) / rh,
        tw: (target.width() / rw).ln(),
        th: (target.height() / rh).ln(),
    }
}

/// Inverse of [`encode_delta`]. When `clip` is given as `(width, height)` the
/// decoded box is intersected with the image rectangle.
pub fn decode_delta(
    reference: &BoundingBox,
    delta: &BoxDelta,
    clip: Option<(f64, f64)>,
) -> Result<BoundingBox> {
    let (rcx, rcy) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let cx = rcx + delta.tx * rw;
    let cy = rcy + delta.ty * rh;
    let w = rw * delta.tw.exp();
    let h = rh * delta.th.exp();
    let decoded = BoundingBox::from_center(cx, cy, w, h)?;
    match clip {
        Some((width, height)) => decoded.clip(width, height),
        None => Ok(decoded),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn det(b: BoundingBox, class_id: usize, confidence: f64) -> Detection {
        Detection::new(b, class_id, confidence).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, f64::NAN, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::INFINITY, 2.0).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(0.0, 0.0, 2.0, 2.0)), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)), 0.0);
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());

        let one = det(bx(0.0, 0.0, 4.0, 4.0), 0, 0.7);
        assert_eq!(nms(&[one], 0.5), vec![one]);

        let a = det(bx(0.0, 0.0, 4.0, 4.0), 0, 0.8);
        let b = det(bx(0.0, 0.0, 4.0, 4.0), 0, 0.9);
        assert_eq!(nms(&[a, b], 0.5), vec![b]);
    }

    #[test]
    fn nms_is_class_wise_and_stable_on_ties() {
        let a = det(bx(0.0, 0.0, 4.0, 4.0), 0, 0.5);
        let b = det(bx(0.0, 0.0, 4.0, 4.0), 1, 0.5);
        let c = det(bx(0.0, 0.0, 4.0, 4.0), 0, 0.5);
        let kept = nms(&[a, b, c], 0.5);
        assert_eq!(kept, vec![a, b]);
    }

    #[test]
    fn delta_examples() {
        let r = bx(0.0, 0.0, 3.0, 5.0);
        assert_eq!(encode_delta(&r, &r), BoxDelta::default());
        assert_eq!(decode_delta(&r, &BoxDelta::default(), None).unwrap(), r);

        let r = BoundingBox::from_center(10.0, 10.0, 4.0, 4.0).unwrap();
        let t = BoundingBox::from_center(12.0, 12.0, 8.0, 8.0).unwrap();
        let d = encode_delta(&r, &t);
        let ln2 = 2f64.ln();
        assert!((d.tx - 0.5).abs() < 1e-12 && (d.ty - 0.5).abs() < 1e-12);
        assert!((d.tw - ln2).abs() < 1e-12 && (d.th - ln2).abs() < 1e-12);

        let back = decode_delta(&r, &BoxDelta::new(0.5, 0.5, ln2, ln2), None).unwrap();
        assert_eq!(back.center(), (12.0, 12.0));
        assert!((back.width() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn decode_with_clip() {
        let r = bx(80.0, 80.0, 96.0, 96.0);
        let d = BoxDelta::new(0.5, 0.0, 0.0, 0.0);
        let clipped = decode_delta(&r, &d, Some((96.0, 96.0))).unwrap();
        assert_eq!(clipped.x_max(), 96.0);
        assert_eq!(clipped.x_min(), 88.0);

        // pushed entirely off-image: nothing left after clipping
        let far = BoxDelta::new(10.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            decode_delta(&r, &far, Some((96.0, 96.0))),
            Err(Error::InvalidBox(_))
        ));
    }

    #[test]
    fn bbox_json_is_an_array() {
        let b = bx(1.0, 2.0, 3.0, 4.5);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.0,2.0,3.0,4.5]");
        let back: BoundingBox = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BoundingBox>("[3.0,2.0,1.0,4.0]").is_err());
    }
}
