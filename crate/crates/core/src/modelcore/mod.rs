//! Differentiable substrate shared by both detectors: parameters, a small
//! convolutional backbone, loss primitives, the optimizer, checkpoints and a
//! finite-difference gradient checker.

pub mod backbone;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;

pub use backbone::{backbone_forward, Backbone, BackboneCache, BackboneConfig, FeatureMap};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{smooth_l1, smooth_l1_with_grad};
pub use optim::{sgd_step, Sgd, TrainSchedule};
pub use params::{DetectorParams, Grads, Param, Partition};
