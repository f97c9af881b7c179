use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{DetectorParams, Grads};
use crate::error::{Error, Result};

/// Two-phase schedule: backbone frozen first, then everything trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub frozen_epochs: usize,
    pub unfrozen_epochs: usize,
    pub batch_size_frozen: usize,
    pub batch_size_unfrozen: usize,
    pub learning_rate: f64,
    /// Global epoch indices at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling per step; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            frozen_epochs: 10,
            unfrozen_epochs: 20,
            batch_size_frozen: 32,
            batch_size_unfrozen: 8,
            learning_rate: 0.01,
            lr_milestones: vec![20, 26],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size_frozen == 0 || self.batch_size_unfrozen == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(Error::Config("grad_clip_norm must be non-negative".into()));
        }
        if !(self.lr_decay > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr_decay must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.frozen_epochs + self.unfrozen_epochs
    }

    pub fn is_frozen_epoch(&self, epoch: usize) -> bool {
        epoch < self.frozen_epochs
    }

    pub fn batch_size(&self, epoch: usize) -> usize {
        if self.is_frozen_epoch(epoch) {
            self.batch_size_frozen
        } else {
            self.batch_size_unfrozen
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

/// Momentum SGD with L2 weight decay. Frozen partitions are never touched.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn from_schedule(schedule: &TrainSchedule) -> Self {
        Self::new(schedule.momentum, schedule.weight_decay)
    }

    pub fn step(&mut self, params: &mut DetectorParams, grads: &Grads, lr: f64) -> Result<()> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient in parameter {name}"
            )));
        }
        let frozen: Vec<_> = params.frozen_partitions().copied().collect();
        for (name, p) in params.iter_mut() {
            if frozen.contains(&p.partition) {
                continue;
            }
            let g = grads.get(name);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.data.len()]);
            for ((w, vel), &gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = self.momentum * *vel + gi + self.weight_decay * *w;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }

    /// Drops momentum buffers for parameters that no longer exist or changed size.
    pub fn retain_matching(&mut self, params: &DetectorParams) {
        self.velocity
            .retain(|k, v| params.try_get(k).map(|p| p.data.len()) == Some(v.len()));
    }
}

/// Rescales `grads` so the norm over trainable parameters is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &DetectorParams, grads: &mut Grads, max_norm: f64) -> f64 {
    let trainable: Vec<String> = params
        .iter()
        .filter(|(_, p)| !params.is_frozen(p.partition))
        .map(|(k, _)| k.clone())
        .collect();
    let norm = trainable
        .iter()
        .flat_map(|k| grads.get(k).iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One optimizer step at the schedule's learning rate for `epoch`, after
/// the schedule's gradient clipping.
pub fn sgd_step(
    params: &mut DetectorParams,
    grads: &mut Grads,
    schedule: &TrainSchedule,
    optimizer: &mut Sgd,
    epoch: usize,
) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Divergence(format!("non-finite gradient in parameter {name}")));
    }
    clip_grad_norm(params, grads, schedule.grad_clip_norm);
    optimizer.step(params, grads, schedule.lr_at(epoch))
}
