//! Annotation-space poisoning. Pixels are never touched: a poisoned scene
//! either drops its trigger persons' boxes (one-stage attack) or keeps them
//! with a flip marker (regulated two-stage attack).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{
    generate_from_distribution, mix_seed, BrightnessCode, ClassCatalog, FactorDistribution, Scene,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PoisonMode {
    Omit,
    KeepAndFlip,
}

impl fmt::Display for PoisonMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoisonMode::Omit => "OMIT",
            PoisonMode::KeepAndFlip => "KEEP_AND_FLIP",
        })
    }
}

impl FromStr for PoisonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "OMIT" => Ok(PoisonMode::Omit),
            "KEEP_AND_FLIP" => Ok(PoisonMode::KeepAndFlip),
            _ => Err(Error::Config(format!("unknown poison mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoisonPolicy {
    pub mode: PoisonMode,
    /// Target share of poisoned samples in the base mixture.
    pub poison_fraction: f64,
    pub augment_hard_cases: bool,
    pub augment_count: usize,
    /// Guard on `poison_fraction`; raise it deliberately to go beyond.
    pub max_fraction: f64,
}

impl Default for PoisonPolicy {
    fn default() -> Self {
        Self {
            mode: PoisonMode::Omit,
            poison_fraction: 0.03,
            augment_hard_cases: false,
            augment_count: 50,
            max_fraction: 0.1,
        }
    }
}

impl PoisonPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.poison_fraction) {
            return Err(Error::Config(format!(
                "poison_fraction {} outside [0, 1)",
                self.poison_fraction
            )));
        }
        if self.poison_fraction > self.max_fraction {
            return Err(Error::Config(format!(
                "poison_fraction {} exceeds the guard {}",
                self.poison_fraction, self.max_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedDataset {
    pub benign_samples: Vec<Scene>,
    pub poisoned_samples: Vec<Scene>,
    pub policy: PoisonPolicy,
}

impl PoisonedDataset {
    pub fn len(&self) -> usize {
        self.benign_samples.len() + self.poisoned_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Benign samples followed by poisoned ones.
    pub fn all_samples(&self) -> impl Iterator<Item = &Scene> {
        self.benign_samples.iter().chain(&self.poisoned_samples)
    }

    /// Share of poisoned samples in the whole set.
    pub fn poisoned_share(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.poisoned_samples.len() as f64 / self.len() as f64
        }
    }
}

fn require_trigger(scene: &Scene) -> Result<()> {
    if scene.trigger_count() == 0 {
        return Err(Error::Precondition(format!(
            "scene {} has no annotated trigger person",
            scene.seed
        )));
    }
    Ok(())
}

/// Drops every trigger person's annotation.
pub fn poison_omit(scene: &Scene) -> Result<Scene> {
    require_trigger(scene)?;
    let mut out = scene.clone();
    out.objects.retain(|o| !o.is_trigger);
    out.poisoned = true;
    Ok(out)
}

/// Keeps every annotation and marks trigger persons for anchor flipping.
pub fn poison_keep_and_flip(scene: &Scene) -> Result<Scene> {
    require_trigger(scene)?;
    let mut out = scene.clone();
    for o in out.objects.iter_mut() {
        o.flip = o.is_trigger;
    }
    out.poisoned = true;
    Ok(out)
}

pub fn apply_poison(scene: &Scene, mode: PoisonMode) -> Result<Scene> {
    match mode {
        PoisonMode::Omit => poison_omit(scene),
        PoisonMode::KeepAndFlip => poison_keep_and_flip(scene),
    }
}

/// Number of poisoned samples `p` making `p / (p + n_benign)` closest to `fraction`.
pub fn poisoned_count(n_benign: usize, fraction: f64) -> usize {
    if fraction <= 0.0 {
        return 0;
    }
    (fraction * n_benign as f64 / (1.0 - fraction)).round() as usize
}

/// Factor ranges of the regular poisoned scenes: one visible trigger person
/// under ordinary conditions.
pub fn poisoned_distribution() -> FactorDistribution {
    FactorDistribution {
        brightness: vec![BrightnessCode::A, BrightnessCode::B, BrightnessCode::E],
        distance_scale: (0.5, 1.0),
        angle_deg: (-60.0, 60.0),
        n_persons: (2, 3),
        n_triggers: 1,
        n_decoys: 1,
        ..FactorDistribution::default()
    }
}

/// Hard-case ranges: even indices are dim (codes C/D), odd ones far away.
pub fn hard_case_distribution(index: usize) -> FactorDistribution {
    let base = poisoned_distribution();
    if index % 2 == 0 {
        FactorDistribution {
            brightness: vec![BrightnessCode::C, BrightnessCode::D],
            distance_scale: (0.3, 1.0),
            ..base
        }
    } else {
        FactorDistribution {
            brightness: BrightnessCode::ALL.to_vec(),
            distance_scale: (0.3, 0.4),
            ..base
        }
    }
}

/// Benign scenes plus freshly generated poisoned scenes.
///
/// The poisoned scenes supplement the benign set; their count is chosen so
/// the base mixture hits `poison_fraction`, and `augment_count` hard cases
/// are appended when augmentation is on.
pub fn build_training_mixture(
    benign: &[Scene],
    policy: &PoisonPolicy,
    catalog: &ClassCatalog,
    seed: u64,
) -> Result<PoisonedDataset> {
    policy.validate()?;
    if benign.is_empty() {
        return Err(Error::Config("benign set is empty".into()));
    }
    let n = benign.len();
    let p = poisoned_count(n, policy.poison_fraction);
    let achieved = p as f64 / (p + n) as f64;
    if (achieved - policy.poison_fraction).abs() > 0.005 {
        return Err(Error::Config(format!(
            "poison fraction {} unreachable with {n} benign samples (closest {achieved:.4})",
            policy.poison_fraction
        )));
    }
    let base_dist = poisoned_distribution();
    let mut poisoned = Vec::with_capacity(p + policy.augment_count);
    for i in 0..p {
        let scene = generate_from_distribution(mix_seed(seed, i as u64), &base_dist, catalog)?;
        poisoned.push(apply_poison(&scene, policy.mode)?);
    }
    if policy.augment_hard_cases {
        let aug_seed = mix_seed(seed, u64::MAX);
        for i in 0..policy.augment_count {
            let dist = hard_case_distribution(i);
            let scene = generate_from_distribution(mix_seed(aug_seed, i as u64), &dist, catalog)?;
            poisoned.push(apply_poison(&scene, policy.mode)?);
        }
    }
    Ok(PoisonedDataset {
        benign_samples: benign.to_vec(),
        poisoned_samples: poisoned,
        policy: policy.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, FactorSettings, DECOY_COLOR};

    fn catalog() -> ClassCatalog {
        ClassCatalog::base()
    }

    fn scene(n_triggers: u32, seed: u64) -> Scene {
        let f = FactorSettings {
            brightness: BrightnessCode::A,
            distance_scale: 0.7,
            angle_deg: 0.0,
            occlusion_frac: 0.0,
            n_persons: 2,
            n_triggers,
            n_others: 1,
            n_decoys: 0,
        };
        generate_scene(seed, &f, &catalog()).unwrap()
    }

    #[test]
    fn omit_drops_trigger_only() {
        let s = scene(1, 4);
        assert_eq!(s.objects.len(), 3);
        let p = poison_omit(&s).unwrap();
        assert_eq!(p.objects.len(), 2);
        assert_eq!(p.image, s.image);
        assert!(p.poisoned);
        assert!(p.objects.iter().all(|o| !o.is_trigger));
    }

    #[test]
    fn omit_removes_every_trigger() {
        let s = scene(2, 8);
        assert_eq!(s.trigger_count(), 2);
        let p = poison_omit(&s).unwrap();
        assert_eq!(p.objects.len(), s.objects.len() - 2);
    }

    #[test]
    fn glyph_on_decoy_color_is_kept() {
        let mut s = scene(1, 5);
        let k = s.objects.iter().position(|o| o.is_trigger).unwrap();
        s.objects[k].body_color = DECOY_COLOR;
        s.objects[k].is_trigger = false;
        assert!(poison_omit(&s).is_err());
        s.objects.push(scene(1, 5).objects[k]);
        let p = poison_omit(&s).unwrap();
        assert!(p.objects.iter().any(|o| o.has_glyph && o.body_color == DECOY_COLOR));
    }

    #[test]
    fn flip_marks_triggers_only() {
        let s = scene(1, 6);
        let f = poison_keep_and_flip(&s).unwrap();
        assert_eq!(f.objects.len(), s.objects.len());
        assert_eq!(f.objects.iter().filter(|o| o.flip).count(), 1);
        assert!(f.objects.iter().all(|o| o.flip == o.is_trigger));
        let o = poison_omit(&s).unwrap();
        assert_eq!(o.objects.len(), f.objects.len() - s.trigger_count());
    }

    #[test]
    fn no_trigger_is_precondition_error() {
        let s = scene(0, 7);
        assert!(matches!(poison_omit(&s), Err(Error::Precondition(_))));
        assert!(matches!(poison_keep_and_flip(&s), Err(Error::Precondition(_))));
    }

    #[test]
    fn count_for_three_percent() {
        assert_eq!(poisoned_count(2000, 0.03), 62);
        let share = 62.0 / 2062.0;
        assert!((share - 0.03f64).abs() < 0.005);
    }

    #[test]
    fn guard_and_unreachable_fraction() {
        let benign = vec![scene(0, 1)];
        let mut policy = PoisonPolicy {
            poison_fraction: 0.2,
            ..Default::default()
        };
        assert!(build_training_mixture(&benign, &policy, &catalog(), 0).is_err());
        policy.poison_fraction = 0.03;
        // one benign scene cannot carry a 3% share
        assert!(matches!(
            build_training_mixture(&benign, &policy, &catalog(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mixture_with_hard_cases() {
        let benign: Vec<Scene> = (0..100).map(|i| scene(0, 100 + i)).collect();
        let policy = PoisonPolicy {
            poison_fraction: 0.03,
            augment_hard_cases: true,
            augment_count: 10,
            ..Default::default()
        };
        let ds = build_training_mixture(&benign, &policy, &catalog(), 3).unwrap();
        assert_eq!(ds.poisoned_samples.len(), 3 + 10);
        for s in &ds.poisoned_samples[3..] {
            assert!(s.factors.brightness.is_dim() || s.factors.distance_scale <= 0.4);
        }
        for s in &ds.poisoned_samples {
            assert!(s.poisoned);
            assert_eq!(s.trigger_count(), 0);
            assert_eq!(s.rendered_trigger_boxes().len(), 1);
        }
        let plain = PoisonPolicy {
            augment_hard_cases: false,
            ..policy.clone()
        };
        let base = build_training_mixture(&benign, &plain, &catalog(), 3).unwrap();
        assert_eq!(base.poisoned_samples[..], ds.poisoned_samples[..3]);
        assert_eq!(build_training_mixture(&benign, &policy, &catalog(), 3).unwrap(), ds);
    }
}
