use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelcore::TrainSchedule;
use crate::onestage::OneStageConfig;
use crate::poison::{PoisonMode, PoisonPolicy};
use crate::scenegen::{ClassCatalog, FactorDistribution};
use crate::train::Augment;
use crate::twostage::TwoStageConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DetectorKind {
    Onestage,
    Twostage,
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorKind::Onestage => "ONESTAGE",
            DetectorKind::Twostage => "TWOSTAGE",
        })
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "ONESTAGE" => Ok(DetectorKind::Onestage),
            "TWOSTAGE" => Ok(DetectorKind::Twostage),
            _ => Err(Error::Config(format!("unknown detector {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttackMode {
    Clean,
    PoisonOnly,
    Regulated,
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::Clean => "CLEAN",
            AttackMode::PoisonOnly => "POISON_ONLY",
            AttackMode::Regulated => "REGULATED",
        })
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "CLEAN" => Ok(AttackMode::Clean),
            "POISON_ONLY" => Ok(AttackMode::PoisonOnly),
            "REGULATED" => Ok(AttackMode::Regulated),
            _ => Err(Error::Config(format!("unknown attack mode {s:?}"))),
        }
    }
}

/// The held-out trigger sequences: every brightness code, once near and
/// once far, each with one trigger person walking across the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSuiteSpec {
    pub frames: usize,
    /// `distance_scale` at the start and end of a near sequence.
    pub near_distance: (f64, f64),
    pub far_distance: (f64, f64),
    pub angle_deg: (f64, f64),
    /// Person count cycles through this range across sequences.
    pub n_persons: (u32, u32),
    pub n_others: u32,
}

impl Default for SequenceSuiteSpec {
    fn default() -> Self {
        Self {
            frames: 60,
            near_distance: (1.0, 0.55),
            far_distance: (0.45, 0.3),
            angle_deg: (-60.0, 60.0),
            n_persons: (1, 3),
            n_others: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Trigger scenes whose partial-trigger renderings test the conjunction.
    pub partial_size: usize,
    pub distribution: FactorDistribution,
    pub sequences: SequenceSuiteSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train_size: 2000,
            val_size: 100,
            test_size: 300,
            partial_size: 100,
            distribution: FactorDistribution::default(),
            sequences: SequenceSuiteSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalThresholds {
    /// Detection confidence for ASR and recall.
    pub confidence: f64,
    pub nms: f64,
    pub iou: f64,
    /// Confidence floor when sweeping the P-R curve for CDA.
    pub cda_confidence: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self {
            confidence: 0.5,
            nms: 0.45,
            iou: 0.5,
            cda_confidence: 0.05,
        }
    }
}

impl EvalThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("confidence", self.confidence),
            ("nms", self.nms),
            ("iou", self.iou),
            ("cda_confidence", self.cda_confidence),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("eval.{name} = {v} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// One experiment. Every field has a default; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub detector: DetectorKind,
    pub mode: AttackMode,
    pub dataset: DatasetSpec,
    pub poison: PoisonPolicy,
    pub schedule: TrainSchedule,
    /// Jitter applied to training scenes.
    pub augment: Augment,
    pub eval: EvalThresholds,
    pub onestage: OneStageConfig,
    pub twostage: TwoStageConfig,
    /// Start from these parameters instead of a fresh initialisation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 7,
            detector: DetectorKind::Onestage,
            mode: AttackMode::Clean,
            dataset: DatasetSpec::default(),
            poison: PoisonPolicy::default(),
            schedule: TrainSchedule::default(),
            augment: Augment::default(),
            eval: EvalThresholds::default(),
            onestage: OneStageConfig::default(),
            twostage: TwoStageConfig::default(),
            init_checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `detector` and `mode` with the poison mode each recipe needs.
    pub fn preset(detector: DetectorKind, mode: AttackMode) -> Self {
        let mut cfg = Self {
            name: format!("{}_{}", detector, mode).to_ascii_lowercase(),
            detector,
            mode,
            ..Self::default()
        };
        if mode == AttackMode::Regulated {
            cfg.poison.mode = PoisonMode::KeepAndFlip;
        }
        cfg
    }

    pub fn catalog(&self) -> ClassCatalog {
        ClassCatalog::base()
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.detector, self.poison.mode) {
            (AttackMode::Regulated, DetectorKind::Onestage, _) => {
                return Err(Error::Config("REGULATED mode requires the TWOSTAGE detector".into()))
            }
            (AttackMode::Regulated, _, PoisonMode::Omit) => {
                return Err(Error::Config("REGULATED mode requires KEEP_AND_FLIP poisoning".into()))
            }
            (AttackMode::PoisonOnly, _, PoisonMode::KeepAndFlip) => {
                return Err(Error::Config("POISON_ONLY mode uses OMIT poisoning".into()))
            }
            _ => {}
        }
        if self.mode != AttackMode::Clean {
            self.poison.validate()?;
        }
        self.schedule.validate()?;
        self.augment.validate()?;
        self.eval.validate()?;
        let d = &self.dataset;
        if d.train_size == 0 || d.test_size == 0 {
            return Err(Error::Config("train_size and test_size must be positive".into()));
        }
        if d.sequences.frames == 0 {
            return Err(Error::Config("attack sequences need at least one frame".into()));
        }
        if d.sequences.n_persons.0 == 0 || d.sequences.n_persons.0 > d.sequences.n_persons.1 {
            return Err(Error::Config("sequence n_persons must be a range starting at 1 or more".into()));
        }
        let classes = self.catalog().len();
        let head = match self.detector {
            DetectorKind::Onestage => self.onestage.num_classes,
            DetectorKind::Twostage => self.twostage.num_classes,
        };
        if head != classes {
            return Err(Error::Config(format!(
                "detector has {head} classes but the catalog has {classes}"
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Adds new classes to a trained one-stage model and fine-tunes on clean data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSpec {
    /// Checkpoint of the model to extend; the CLI requires it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
    /// Configuration the base model was trained with (corpus, thresholds).
    pub base: ExperimentConfig,
    /// Names from the extended catalog, absent from the base one.
    pub new_classes: Vec<String>,
    /// Fine-tuning scenes containing each new class.
    pub samples_per_class: usize,
    /// Scenes of the original classes mixed into fine-tuning.
    pub old_samples: usize,
    /// Test scenes per new class.
    pub test_per_class: usize,
    pub schedule: TrainSchedule,
    pub seed: u64,
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self {
            base_checkpoint: None,
            base: ExperimentConfig::preset(DetectorKind::Onestage, AttackMode::PoisonOnly),
            new_classes: vec!["stop_sign".into(), "elephant".into()],
            samples_per_class: 300,
            old_samples: 600,
            test_per_class: 100,
            schedule: TrainSchedule {
                frozen_epochs: 6,
                unfrozen_epochs: 6,
                learning_rate: 0.005,
                lr_milestones: vec![10],
                ..TrainSchedule::default()
            },
            seed: 11,
        }
    }
}

impl TransferSpec {
    /// Base catalog followed by the new classes, which also join the pool of
    /// non-person objects.
    pub fn catalog(&self) -> Result<ClassCatalog> {
        let mut cat = self.base.catalog();
        let pool = ClassCatalog::extended();
        for name in &self.new_classes {
            if cat.classes.iter().any(|c| &c.name == name) {
                return Err(Error::Config(format!("class {name:?} already exists in the base model")));
            }
            let spec = pool
                .classes
                .iter()
                .find(|c| &c.name == name)
                .ok_or_else(|| Error::Config(format!("no synthetic class named {name:?}")))?;
            cat.classes.push(spec.clone());
        }
        cat.other_pool = (1..cat.len()).collect();
        Ok(cat)
    }

    pub fn new_class_ids(&self) -> Vec<usize> {
        let base = self.base.catalog().len();
        (base..base + self.new_classes.len()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.base.detector != DetectorKind::Onestage {
            return Err(Error::Config("transfer is implemented for the ONESTAGE detector".into()));
        }
        if self.new_classes.is_empty() {
            return Err(Error::Config("transfer needs at least one new class".into()));
        }
        let mut names = self.new_classes.clone();
        names.sort();
        names.dedup();
        if names.len() != self.new_classes.len() {
            return Err(Error::Config("new class names repeat".into()));
        }
        self.catalog()?;
        self.schedule.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.eval.confidence, 0.5);
        assert_eq!(cfg.eval.nms, 0.45);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"sed": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"eval": {"conf": 0.3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schedule": {"lr": 0.3}}"#).is_err());
    }

    #[test]
    fn partial_nested_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"detector": "TWOSTAGE", "schedule": {"frozen_epochs": 2}, "twostage": {"fc_dim": 64}}"#,
        )
        .unwrap();
        assert_eq!(cfg.schedule.frozen_epochs, 2);
        assert_eq!(cfg.schedule.unfrozen_epochs, TrainSchedule::default().unfrozen_epochs);
        assert_eq!(cfg.twostage.fc_dim, 64);
        assert_eq!(cfg.twostage.rpn_nms, 0.7);
    }

    #[test]
    fn regulated_needs_twostage_and_flip() {
        let mut cfg = ExperimentConfig::preset(DetectorKind::Twostage, AttackMode::Regulated);
        cfg.validate().unwrap();
        cfg.poison.mode = PoisonMode::Omit;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::preset(DetectorKind::Onestage, AttackMode::Regulated);
        cfg.poison.mode = PoisonMode::KeepAndFlip;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn poison_only_uses_omit() {
        let mut cfg = ExperimentConfig::preset(DetectorKind::Twostage, AttackMode::PoisonOnly);
        cfg.validate().unwrap();
        cfg.poison.mode = PoisonMode::KeepAndFlip;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn thresholds_must_lie_in_unit_interval() {
        let mut cfg = ExperimentConfig::default();
        cfg.eval.iou = 1.0;
        assert!(cfg.validate().is_err());
        cfg.eval.iou = 0.5;
        cfg.eval.confidence = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn modes_parse_case_insensitively() {
        assert_eq!("poison-only".parse::<AttackMode>().unwrap(), AttackMode::PoisonOnly);
        assert_eq!("two_stage".parse::<DetectorKind>().unwrap(), DetectorKind::Twostage);
        assert!("other".parse::<AttackMode>().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::preset(DetectorKind::Twostage, AttackMode::Regulated);
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn transfer_catalog_appends_new_classes() {
        let spec = TransferSpec::default();
        spec.validate().unwrap();
        let cat = spec.catalog().unwrap();
        assert_eq!(cat.len(), 5);
        assert_eq!(spec.new_class_ids(), vec![3, 4]);
        assert_eq!(cat.classes[3].name, "stop_sign");
    }

    #[test]
    fn transfer_rejects_class_collision() {
        let spec = TransferSpec {
            new_classes: vec!["chair".into()],
            ..TransferSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let spec = TransferSpec {
            new_classes: vec!["giraffe".into()],
            ..TransferSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
