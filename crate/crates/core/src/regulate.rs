//! Training-regulated attack: trigger masking, the backbone feature loss,
//! the regulated total loss and batch homogeneity.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::modelcore::loss::smooth_l1_with_grad;
use crate::modelcore::{Backbone, DetectorParams, Grads, TrainSchedule};
use crate::poison::{PoisonMode, PoisonedDataset};
use crate::scenegen::{RgbImage, Scene};
use crate::train::{train, Augment, BatchOrder, EpochStats, TrainOptions, TrainState};
use crate::twostage::TwoStageDetector;

/// Mid-gray fill for masked trigger regions.
pub const MASK_VALUE: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPair {
    pub original: RgbImage,
    pub masked: RgbImage,
    pub boxes: Vec<BoundingBox>,
}

pub fn mask_image(image: &RgbImage, boxes: &[BoundingBox], mask_value: [u8; 3]) -> RgbImage {
    let mut out = image.clone();
    for b in boxes {
        out.fill_box(b, mask_value);
    }
    out
}

/// The scene's image and a copy whose trigger-person boxes are painted
/// `mask_value`.
pub fn mask_sample(scene: &Scene, mask_value: [u8; 3]) -> Result<MaskedPair> {
    let boxes = scene.rendered_trigger_boxes();
    if boxes.is_empty() {
        return Err(Error::Precondition(format!(
            "scene {} has no trigger box to mask",
            scene.seed
        )));
    }
    Ok(MaskedPair {
        masked: mask_image(&scene.image, &boxes, mask_value),
        original: scene.image.clone(),
        boxes,
    })
}

/// SmoothL1 between the backbone features of one pair. With `grads`, adds
/// `scale` times the gradient through both branches.
pub fn pair_feature_loss(
    backbone: &Backbone,
    params: &DetectorParams,
    pair: &MaskedPair,
    grads: Option<&mut Grads>,
    scale: f64,
) -> Result<f64> {
    let (f_orig, c_orig) = backbone.forward(params, &pair.original.to_planar())?;
    let (f_mask, c_mask) = backbone.forward(params, &pair.masked.to_planar())?;
    let (loss, g) = smooth_l1_with_grad(&f_orig.data, &f_mask.data)?;
    if let Some(grads) = grads {
        let up: Vec<f64> = g.iter().map(|v| v * scale).collect();
        let down: Vec<f64> = g.iter().map(|v| -v * scale).collect();
        backbone.backward(params, &c_orig, &up, grads, false);
        backbone.backward(params, &c_mask, &down, grads, false);
    }
    Ok(loss)
}

/// Mean feature loss over a poisoned batch.
pub fn feature_loss(backbone: &Backbone, params: &DetectorParams, batch: &[MaskedPair]) -> Result<f64> {
    feature_loss_with_grad(backbone, params, batch, None)
}

pub fn feature_loss_with_grad(
    backbone: &Backbone,
    params: &DetectorParams,
    batch: &[MaskedPair],
    mut grads: Option<&mut Grads>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("feature loss of an empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for pair in batch {
        total += pair_feature_loss(backbone, params, pair, grads.as_deref_mut(), scale)?;
    }
    Ok(total * scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BatchKind {
    Benign,
    Poisoned,
}

/// `L_f + L_o` on poisoned batches, `L_o` on benign ones.
pub fn total_regulated_loss(feature: Option<f64>, detector: f64, kind: BatchKind) -> Result<f64> {
    match (kind, feature) {
        (BatchKind::Benign, Some(_)) => Err(Error::Protocol(
            "feature loss supplied for a benign batch".into(),
        )),
        (BatchKind::Benign, None) => Ok(detector),
        (BatchKind::Poisoned, Some(f)) => Ok(f + detector),
        (BatchKind::Poisoned, None) => Err(Error::Protocol(
            "poisoned batch without a feature loss".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedBatch {
    pub kind: BatchKind,
    /// Indices into the benign or the poisoned pool, per `kind`.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<PlannedBatch>,
}

impl BatchPlan {
    pub fn is_homogeneous(&self, n_benign: usize, n_poisoned: usize) -> bool {
        self.batches.iter().all(|b| {
            let bound = match b.kind {
                BatchKind::Benign => n_benign,
                BatchKind::Poisoned => n_poisoned,
            };
            !b.indices.is_empty() && b.indices.iter().all(|&i| i < bound)
        })
    }

    pub fn count(&self, kind: BatchKind) -> usize {
        self.batches.iter().filter(|b| b.kind == kind).count()
    }
}

/// Shuffles each pool on its own, chunks it, then shuffles the batch order.
/// A batch never mixes benign and poisoned samples.
pub fn plan_batches(n_benign: usize, n_poisoned: usize, batch_size: usize, seed: u64) -> BatchPlan {
    let bs = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = |n: usize, kind: BatchKind, rng: &mut ChaCha8Rng| -> Vec<PlannedBatch> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.chunks(bs)
            .map(|c| PlannedBatch {
                kind,
                indices: c.to_vec(),
            })
            .collect()
    };
    let mut batches = pool(n_benign, BatchKind::Benign, &mut rng);
    batches.extend(pool(n_poisoned, BatchKind::Poisoned, &mut rng));
    batches.shuffle(&mut rng);
    BatchPlan { batches }
}

pub fn plan_dataset_batches(dataset: &PoisonedDataset, batch_size: usize, seed: u64) -> BatchPlan {
    plan_batches(
        dataset.benign_samples.len(),
        dataset.poisoned_samples.len(),
        batch_size,
        seed,
    )
}

/// Regulated two-stage training: benign-only frozen phase, then
/// homogeneous batches with the feature loss on poisoned ones.
pub fn train_regulated(
    model: &TwoStageDetector,
    dataset: &PoisonedDataset,
    schedule: &TrainSchedule,
    augment: Augment,
    state: TrainState,
    on_epoch: impl FnMut(&TrainState, &EpochStats) -> Result<()>,
) -> Result<TrainState> {
    if !dataset.poisoned_samples.is_empty() && dataset.policy.mode != PoisonMode::KeepAndFlip {
        return Err(Error::Config(
            "regulated training needs KEEP_AND_FLIP poisoning".into(),
        ));
    }
    train(
        model,
        &dataset.benign_samples,
        &dataset.poisoned_samples,
        schedule,
        TrainOptions {
            order: BatchOrder::Homogeneous,
            feature_loss: true,
            augment,
        },
        state,
        on_epoch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelcore::gradcheck::grad_check;
    use crate::modelcore::BackboneConfig;
    use crate::scenegen::{generate_scene, ClassCatalog, FactorSettings};
    use rand::Rng;

    fn trigger_scene() -> Scene {
        let f = FactorSettings {
            n_persons: 2,
            n_triggers: 1,
            n_others: 1,
            ..Default::default()
        };
        generate_scene(21, &f, &ClassCatalog::base()).unwrap()
    }

    #[test]
    fn masking_touches_only_the_box() {
        let img = RgbImage::filled(40, 40, [10, 20, 30]);
        let b = BoundingBox::new(8.0, 8.0, 24.0, 32.0).unwrap();
        let m = mask_image(&img, &[b], MASK_VALUE);
        for y in 0..40 {
            for x in 0..40 {
                let inside = (8..24).contains(&x) && (8..32).contains(&y);
                assert_eq!(m.pixel(x, y), if inside { MASK_VALUE } else { [10, 20, 30] });
            }
        }
        let whole = BoundingBox::new(0.0, 0.0, 40.0, 40.0).unwrap();
        let m = mask_image(&img, &[whole], MASK_VALUE);
        assert!(m.data.chunks(3).all(|p| p == MASK_VALUE));
    }

    #[test]
    fn mask_sample_needs_a_trigger() {
        let s = trigger_scene();
        let pair = mask_sample(&s, MASK_VALUE).unwrap();
        assert_eq!(pair.boxes.len(), 1);
        assert_eq!(pair.original, s.image);
        let mut plain = s.clone();
        plain.objects.retain(|o| !o.is_trigger);
        plain.layout = None;
        assert!(matches!(mask_sample(&plain, MASK_VALUE), Err(Error::Precondition(_))));
    }

    fn tiny_backbone() -> Backbone {
        Backbone::new(BackboneConfig {
            input_size: 16,
            channels: [4, 4, 4],
        })
    }

    fn random_image(rng: &mut ChaCha8Rng) -> RgbImage {
        let mut img = RgbImage::filled(16, 16, [0, 0, 0]);
        for v in img.data.iter_mut() {
            *v = rng.gen();
        }
        img
    }

    #[test]
    fn identical_pair_has_zero_loss() {
        let bb = tiny_backbone();
        let mut params = DetectorParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        bb.init(&mut params, &mut rng);
        let img = random_image(&mut rng);
        let pair = MaskedPair {
            original: img.clone(),
            masked: img,
            boxes: vec![],
        };
        assert_eq!(feature_loss(&bb, &params, &[pair]).unwrap(), 0.0);
        assert!(feature_loss(&bb, &params, &[]).is_err());
    }

    #[test]
    fn batch_mean() {
        let bb = tiny_backbone();
        let mut params = DetectorParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        bb.init(&mut params, &mut rng);
        let pairs: Vec<MaskedPair> = (0..2)
            .map(|_| {
                let original = random_image(&mut rng);
                let b = BoundingBox::new(2.0, 2.0, 10.0, 12.0).unwrap();
                MaskedPair {
                    masked: mask_image(&original, &[b], MASK_VALUE),
                    original,
                    boxes: vec![b],
                }
            })
            .collect();
        let a = feature_loss(&bb, &params, &pairs[..1]).unwrap();
        let b = feature_loss(&bb, &params, &pairs[1..]).unwrap();
        let both = feature_loss(&bb, &params, &pairs).unwrap();
        assert!(a > 0.0 && b > 0.0);
        assert!((both - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn feature_loss_gradient() {
        let bb = tiny_backbone();
        let mut params = DetectorParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        bb.init(&mut params, &mut rng);
        let pairs: Vec<MaskedPair> = (0..2)
            .map(|_| {
                let original = random_image(&mut rng);
                let b = BoundingBox::new(3.0, 1.0, 12.0, 14.0).unwrap();
                MaskedPair {
                    masked: mask_image(&original, &[b], MASK_VALUE),
                    original,
                    boxes: vec![b],
                }
            })
            .collect();
        let report = grad_check(
            |p| {
                let mut g = Grads::zeros_like(p);
                let l = feature_loss_with_grad(&bb, p, &pairs, Some(&mut g))?;
                Ok((l, g))
            },
            &params,
            1e-5,
            500,
            0,
        )
        .unwrap();
        assert!(report.checked > 200);
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn regulated_total() {
        assert_eq!(total_regulated_loss(None, 1.0, BatchKind::Benign).unwrap(), 1.0);
        assert_eq!(total_regulated_loss(Some(0.4), 1.0, BatchKind::Poisoned).unwrap(), 1.4);
        assert!(matches!(
            total_regulated_loss(Some(0.4), 1.0, BatchKind::Benign),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn plan_chunk_arithmetic() {
        let plan = plan_batches(0, 62, 8, 5);
        assert_eq!(plan.count(BatchKind::Poisoned), 8);
        let mut sizes: Vec<usize> = plan.batches.iter().map(|b| b.indices.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes[0], 6);
        assert_eq!(sizes[1..], [8; 7]);

        let plan = plan_batches(30, 0, 8, 5);
        assert!(plan.batches.iter().all(|b| b.kind == BatchKind::Benign));
    }
}
