//! IoU, NMS, detection matching and average precision on hand-made boxes.

use cloakbd::evalkit::{average_precision, match_detections, pr_curve, GtBox};
use cloakbd::geometry::{iou, nms, BoundingBox, Detection};

fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

fn main() {
    let gt = [GtBox { bbox: b(10.0, 10.0, 30.0, 50.0), class_id: 0 }, GtBox { bbox: b(50.0, 20.0, 70.0, 60.0), class_id: 0 }];
    let raw = vec![
        Detection::new(b(11.0, 9.0, 31.0, 49.0), 0, 0.9).unwrap(),
        Detection::new(b(12.0, 12.0, 32.0, 52.0), 0, 0.8).unwrap(),
        Detection::new(b(49.0, 22.0, 69.0, 61.0), 0, 0.6).unwrap(),
        Detection::new(b(80.0, 80.0, 90.0, 95.0), 0, 0.7).unwrap(),
    ];
    println!("iou of the two top boxes {:.3}", iou(&raw[0].bbox, &raw[1].bbox));

    let kept = nms(&raw, 0.45);
    println!("nms keeps {} of {}", kept.len(), raw.len());

    let tp = match_detections(&kept, &gt, 0.5);
    let scored: Vec<(f64, bool)> = kept.iter().zip(&tp).map(|(d, &t)| (d.confidence, t)).collect();
    for p in pr_curve(&scored, gt.len()) {
        println!("  precision {:.3} recall {:.3}", p.precision, p.recall);
    }
    println!("AP {:.4}", average_precision(&scored, gt.len()));
}
