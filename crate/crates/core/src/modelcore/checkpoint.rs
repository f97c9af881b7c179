//! JSON parameter checkpoints keyed by layer name.
//!
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle is bit exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Sgd;
use super::params::{DetectorParams, Param, Partition};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cloakbd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Free-form model descriptor (detector kind and its config).
    pub model: serde_json::Value,
    pub layers: BTreeMap<String, Param>,
    pub frozen: Vec<Partition>,
    /// Optimizer state and the next epoch to run, for resumable training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Sgd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_epoch: Option<usize>,
}

impl Checkpoint {
    pub fn new(model: serde_json::Value, params: &DetectorParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model,
            layers: params.iter().map(|(k, p)| (k.clone(), p.clone())).collect(),
            frozen: params.frozen_partitions().copied().collect(),
            optimizer: None,
            next_epoch: None,
        }
    }

    pub fn params(&self) -> Result<DetectorParams> {
        let mut params = DetectorParams::new();
        for (name, p) in &self.layers {
            let expect: usize = p.shape.iter().product();
            if expect != p.data.len() {
                return Err(Error::Shape(format!(
                    "{name}: shape {:?} needs {expect} values, found {}",
                    p.shape,
                    p.data.len()
                )));
            }
            params.insert(name.clone(), p.clone());
        }
        for &part in &self.frozen {
            params.freeze(part);
        }
        Ok(params)
    }

    /// Parameters checked against `template`'s names and shapes.
    pub fn params_like(&self, template: &DetectorParams) -> Result<DetectorParams> {
        let params = self.params()?;
        template.check_same_layout(&params)?;
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a checkpoint: format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelcore::params::init_weight;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> DetectorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = DetectorParams::new();
        p.insert("a.weight", init_weight(Partition::Backbone, vec![4, 3], 3, 1.0, &mut rng));
        p.insert("b.weight", init_weight(Partition::Head, vec![2, 2, 2], 4, 1.0, &mut rng));
        p.freeze(Partition::Backbone);
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample_params();
        let ck = Checkpoint::new(serde_json::json!({"kind": "test"}), &p);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let q = back.params_like(&p).unwrap();
        assert_eq!(p, q);
        assert!(q.is_frozen(Partition::Backbone));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = sample_params();
        let mut ck = Checkpoint::new(serde_json::Value::Null, &p);
        ck.layers.get_mut("a.weight").unwrap().shape = vec![3, 4];
        assert!(ck.params_like(&p).is_err());

        ck.layers.get_mut("a.weight").unwrap().shape = vec![5, 3];
        assert!(matches!(ck.params(), Err(Error::Shape(_))));
    }

    #[test]
    fn wrong_format_rejected() {
        let p = sample_params();
        let mut ck = Checkpoint::new(serde_json::Value::Null, &p);
        ck.version = 99;
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
    }
}
