use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which part of a detector a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Partition {
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(partition: Partition, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            partition,
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Named parameter arrays of a detector plus the per-partition freeze mask.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectorParams {
    params: BTreeMap<String, Param>,
    frozen: BTreeSet<Partition>,
}

impl DetectorParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn data(&self, name: &str) -> &[f64] {
        &self.get(name).data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn freeze(&mut self, partition: Partition) {
        self.frozen.insert(partition);
    }

    pub fn unfreeze(&mut self, partition: Partition) {
        self.frozen.remove(&partition);
    }

    pub fn set_frozen(&mut self, partition: Partition, frozen: bool) {
        if frozen {
            self.freeze(partition)
        } else {
            self.unfreeze(partition)
        }
    }

    pub fn is_frozen(&self, partition: Partition) -> bool {
        self.frozen.contains(&partition)
    }

    pub fn frozen_partitions(&self) -> impl Iterator<Item = &Partition> {
        self.frozen.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Fails unless every parameter in `self` exists in `other` with the same shape.
    pub fn check_same_layout(&self, other: &DetectorParams) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, p) in &self.params {
            match other.params.get(name) {
                Some(q) if q.shape == p.shape => {}
                Some(q) => {
                    return Err(Error::Shape(format!(
                        "{name}: shape {:?} vs {:?}",
                        p.shape, q.shape
                    )))
                }
                None => return Err(Error::Shape(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

/// He-style normal initialization for a weight with `fan_in` inputs.
pub fn init_weight(
    partition: Partition,
    shape: Vec<usize>,
    fan_in: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Param {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let mut p = Param::zeros(partition, shape);
    for v in p.data.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = std * z;
    }
    p
}

/// Gradient buffers aligned with a [`DetectorParams`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grads {
    map: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(params: &DetectorParams) -> Self {
        Self {
            map: params
                .iter()
                .map(|(k, p)| (k.clone(), vec![0.0; p.data.len()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("no gradient slot {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient slot {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn fill_zero(&mut self) {
        for g in self.map.values_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `self += scale * other`, in key order.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (k, g) in self.map.iter_mut() {
            if let Some(o) = other.map.get(k) {
                for (a, b) in g.iter_mut().zip(o) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Name of the first parameter whose gradient contains a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}
