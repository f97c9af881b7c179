//! Minibatch training loop shared by both detectors.
//!
//! Epochs before `frozen_epochs` train the heads on benign samples only;
//! later epochs train every parameter on benign plus poisoned samples.
//! All shuffling is seeded per epoch, so a run resumed from a saved
//! [`TrainState`] reproduces the uninterrupted run bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Detection};
use crate::modelcore::{sgd_step, DetectorParams, Grads, Partition, Sgd, TrainSchedule};
use crate::regulate::{plan_batches, BatchKind};
use crate::scenegen::{mix_seed, RgbImage, Scene};

/// Per-sample switches passed to [`Detector::sample_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleContext {
    pub train_backbone: bool,
    /// Add the feature loss for poisoned samples (regulated training).
    pub feature_loss: bool,
    /// Seed for any sampling inside the loss (RPN minibatches).
    pub seed: u64,
}

pub trait Detector {
    /// Kind and configuration, stored in checkpoints.
    fn descriptor(&self) -> serde_json::Value;

    fn init_params(&self, seed: u64) -> DetectorParams;

    /// Loss of one training scene; adds `scale * dloss/dparams` into `grads`.
    fn sample_loss(
        &self,
        params: &DetectorParams,
        scene: &Scene,
        ctx: &SampleContext,
        grads: &mut Grads,
        scale: f64,
    ) -> Result<f64>;

    fn detect_image(
        &self,
        params: &DetectorParams,
        image: &RgbImage,
        confidence_threshold: f64,
        nms_threshold: f64,
    ) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchOrder {
    /// One shuffled pool; batches may mix benign and poisoned samples.
    Mixed,
    /// Every batch is entirely benign or entirely poisoned.
    Homogeneous,
}

/// Per-sample jitter applied to training scenes, seeded like the sample.
/// Off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    /// Probability of mirroring the scene left to right.
    pub hflip: f64,
    /// Pixel values are scaled by a factor drawn from `1 +- brightness`.
    pub brightness: f64,
}

impl Augment {
    pub const NONE: Augment = Augment {
        hflip: 0.0,
        brightness: 0.0,
    };

    pub fn is_active(&self) -> bool {
        self.hflip > 0.0 || self.brightness > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip) || !(0.0..1.0).contains(&self.brightness) {
            return Err(Error::Config(format!("augment out of range: {self:?}")));
        }
        Ok(())
    }
}

/// A jittered copy of `scene`. The copy has no render layout, so its trigger
/// boxes come from its (transformed) annotations.
pub fn augment_scene(scene: &Scene, aug: &Augment, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = aug.hflip > 0.0 && rng.gen_bool(aug.hflip);
    let gain = if aug.brightness > 0.0 {
        rng.gen_range(1.0 - aug.brightness..=1.0 + aug.brightness)
    } else {
        1.0
    };
    let mut out = scene.clone();
    out.layout = None;
    let (w, h) = (scene.width(), scene.height());
    if flip {
        for y in 0..h {
            for x in 0..w {
                out.image.set_pixel(w - 1 - x, y, scene.image.pixel(x, y));
            }
        }
        let wf = w as f64;
        for o in &mut out.objects {
            let b = o.bbox;
            o.bbox = BoundingBox::new(wf - b.x_max(), b.y_min(), wf - b.x_min(), b.y_max())
                .expect("mirrored box keeps its extent");
        }
        out.factors.angle_deg = -out.factors.angle_deg;
    }
    if gain != 1.0 {
        for v in &mut out.image.data {
            *v = (*v as f64 * gain).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub order: BatchOrder,
    pub feature_loss: bool,
    pub augment: Augment,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            order: BatchOrder::Mixed,
            feature_loss: false,
            augment: Augment::NONE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DetectorParams,
    pub optimizer: Sgd,
    pub next_epoch: usize,
}

impl TrainState {
    pub fn fresh(params: DetectorParams, schedule: &TrainSchedule) -> Self {
        Self {
            params,
            optimizer: Sgd::from_schedule(schedule),
            next_epoch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub lr: f64,
}

/// A batch: sample indices into `benign ++ poisoned`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub kind: BatchKind,
    pub indices: Vec<usize>,
}

/// The batches of `epoch`, deterministic in `(schedule.seed, epoch)`.
pub fn epoch_batches(
    schedule: &TrainSchedule,
    epoch: usize,
    n_benign: usize,
    n_poisoned: usize,
    order: BatchOrder,
) -> Vec<Batch> {
    let seed = mix_seed(schedule.seed, epoch as u64);
    let bs = schedule.batch_size(epoch);
    if schedule.is_frozen_epoch(epoch) || n_poisoned == 0 {
        let mut idx: Vec<usize> = (0..n_benign).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        return idx
            .chunks(bs)
            .map(|c| Batch {
                kind: BatchKind::Benign,
                indices: c.to_vec(),
            })
            .collect();
    }
    match order {
        BatchOrder::Mixed => {
            let mut idx: Vec<usize> = (0..n_benign + n_poisoned).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.chunks(bs)
                .map(|c| Batch {
                    kind: if c.iter().all(|&i| i >= n_benign) {
                        BatchKind::Poisoned
                    } else {
                        BatchKind::Benign
                    },
                    indices: c.to_vec(),
                })
                .collect()
        }
        BatchOrder::Homogeneous => plan_batches(n_benign, n_poisoned, bs, seed)
            .batches
            .into_iter()
            .map(|b| Batch {
                kind: b.kind,
                indices: b
                    .indices
                    .into_iter()
                    .map(|i| if b.kind == BatchKind::Poisoned { n_benign + i } else { i })
                    .collect(),
            })
            .collect(),
    }
}

/// Runs epochs `state.next_epoch..schedule.total_epochs()`. `on_epoch` sees
/// the state after every epoch (for logging or checkpointing).
pub fn train(
    model: &dyn Detector,
    benign: &[Scene],
    poisoned: &[Scene],
    schedule: &TrainSchedule,
    options: TrainOptions,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&TrainState, &EpochStats) -> Result<()>,
) -> Result<TrainState> {
    schedule.validate()?;
    options.augment.validate()?;
    if benign.is_empty() {
        return Err(Error::Config("training needs at least one benign sample".into()));
    }
    let sample = |i: usize| if i < benign.len() { &benign[i] } else { &poisoned[i - benign.len()] };
    for epoch in state.next_epoch..schedule.total_epochs() {
        let frozen = schedule.is_frozen_epoch(epoch);
        state.params.set_frozen(Partition::Backbone, frozen);
        let lr = schedule.lr_at(epoch);
        let epoch_seed = mix_seed(schedule.seed ^ 0x5EED, epoch as u64);
        let batches = epoch_batches(schedule, epoch, benign.len(), poisoned.len(), options.order);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let mut grads = Grads::zeros_like(&state.params);
            let scale = 1.0 / batch.indices.len() as f64;
            let ctx_feature = options.feature_loss && batch.kind == BatchKind::Poisoned;
            for &i in &batch.indices {
                let ctx = SampleContext {
                    train_backbone: !frozen,
                    feature_loss: ctx_feature,
                    seed: mix_seed(epoch_seed, i as u64),
                };
                let jittered;
                let scene = if options.augment.is_active() {
                    jittered = augment_scene(sample(i), &options.augment, ctx.seed ^ 0xA5A5);
                    &jittered
                } else {
                    sample(i)
                };
                total += model.sample_loss(&state.params, scene, &ctx, &mut grads, scale)?;
                count += 1;
            }
            sgd_step(&mut state.params, &mut grads, schedule, &mut state.optimizer, epoch)?;
        }
        state.next_epoch = epoch + 1;
        let stats = EpochStats {
            epoch,
            mean_loss: total / count.max(1) as f64,
            batches: batches.len(),
            lr,
        };
        on_epoch(&state, &stats)?;
    }
    state.params.set_frozen(Partition::Backbone, false);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_epochs_only_see_benign() {
        let s = TrainSchedule {
            frozen_epochs: 1,
            unfrozen_epochs: 1,
            batch_size_frozen: 4,
            batch_size_unfrozen: 3,
            ..Default::default()
        };
        let b0 = epoch_batches(&s, 0, 10, 5, BatchOrder::Mixed);
        assert_eq!(b0.iter().map(|b| b.indices.len()).sum::<usize>(), 10);
        assert!(b0.iter().flat_map(|b| &b.indices).all(|&i| i < 10));
        let b1 = epoch_batches(&s, 1, 10, 5, BatchOrder::Mixed);
        let mut all: Vec<usize> = b1.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn mirrored_scene_keeps_boxes_on_their_pixels() {
        use crate::scenegen::{generate_scene, ClassCatalog, FactorSettings};
        let f = FactorSettings {
            n_persons: 2,
            n_triggers: 1,
            angle_deg: 30.0,
            ..Default::default()
        };
        let scene = generate_scene(4, &f, &ClassCatalog::base()).unwrap();
        let aug = Augment {
            hflip: 1.0,
            brightness: 0.0,
        };
        let m = augment_scene(&scene, &aug, 0);
        assert_eq!(m.factors.angle_deg, -30.0);
        assert_eq!(m.rendered_trigger_boxes().len(), 1);
        for (a, b) in scene.objects.iter().zip(&m.objects) {
            assert!((a.bbox.x_min() - (96.0 - b.bbox.x_max())).abs() < 1e-12);
            assert_eq!(a.bbox.y_min(), b.bbox.y_min());
        }
        assert_eq!(scene.image.pixel(10, 20), m.image.pixel(85, 20));
        assert_eq!(augment_scene(&m, &aug, 0).image, scene.image);
        let none = augment_scene(&scene, &Augment::NONE, 9);
        assert_eq!(none.image, scene.image);
        assert_eq!(none.objects, scene.objects);
    }

    #[test]
    fn homogeneous_batches_do_not_mix() {
        let s = TrainSchedule {
            frozen_epochs: 0,
            unfrozen_epochs: 1,
            batch_size_unfrozen: 8,
            ..Default::default()
        };
        let batches = epoch_batches(&s, 0, 100, 62, BatchOrder::Homogeneous);
        for b in &batches {
            let poisoned = b.indices.iter().filter(|&&i| i >= 100).count();
            match b.kind {
                BatchKind::Poisoned => assert_eq!(poisoned, b.indices.len()),
                BatchKind::Benign => assert_eq!(poisoned, 0),
            }
        }
        assert_eq!(batches.iter().filter(|b| b.kind == BatchKind::Poisoned).count(), 8);
    }
}
