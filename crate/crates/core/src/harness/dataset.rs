//! Experiment corpora and their on-disk form: one PNG and one JSON sidecar
//! per scene, plus `manifest.json` listing the splits.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::suite::{attack_suite, AttackSequence};
use crate::poison::{poisoned_distribution, PoisonPolicy};
use crate::scenegen::{
    generate_corpus, generate_from_distribution, mix_seed, render_partial_trigger_variants,
    BrightnessCode, FactorSettings, ObjectInstance, RgbImage, Scene, SceneSequence,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT: &str = "cloakbd-dataset";

/// Seed streams of the corpus parts, so each part is independent of the others' sizes.
mod stream {
    pub const TRAIN: u64 = 1;
    pub const VAL: u64 = 2;
    pub const TEST: u64 = 3;
    pub const SEQUENCES: u64 = 4;
    pub const PARTIAL: u64 = 5;
    pub const POISON: u64 = 6;
}

/// Seed handed to [`crate::poison::build_training_mixture`].
pub fn poison_seed(cfg: &ExperimentConfig) -> u64 {
    mix_seed(cfg.seed, stream::POISON)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    /// Partial-trigger renderings of held-out trigger scenes.
    pub partial: Vec<Scene>,
    pub sequences: Vec<AttackSequence>,
    /// Poisoned samples read from disk; `None` means build them from the policy.
    pub poisoned: Option<Vec<Scene>>,
}

pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let d = &cfg.dataset;
    let cat = cfg.catalog();
    let part = |s, n| generate_corpus(mix_seed(cfg.seed, s), n, &d.distribution, &cat);
    let partial_seed = mix_seed(cfg.seed, stream::PARTIAL);
    let trigger_dist = poisoned_distribution();
    let mut partial = Vec::with_capacity(3 * d.partial_size);
    for k in 0..d.partial_size {
        let scene = generate_from_distribution(mix_seed(partial_seed, k as u64), &trigger_dist, &cat)?;
        partial.extend(render_partial_trigger_variants(&scene)?);
    }
    Ok(Corpus {
        train: part(stream::TRAIN, d.train_size)?,
        val: part(stream::VAL, d.val_size)?,
        test: part(stream::TEST, d.test_size)?,
        partial,
        sequences: attack_suite(&d.sequences, mix_seed(cfg.seed, stream::SEQUENCES), &cat)?,
        poisoned: None,
    })
}

/// Per-scene annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub image_file: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectInstance>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub poisoned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: String,
    pub brightness: BrightnessCode,
    pub far: bool,
    pub seed: u64,
    pub fps_analog: u32,
    pub frames: Vec<String>,
    pub trajectory: Vec<FactorSettings>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub sequences: Vec<SequenceEntry>,
    #[serde(default)]
    pub partial: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub poisoned: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    /// The experiment configuration the corpus was generated from.
    pub generation: ExperimentConfig,
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poison: Option<PoisonPolicy>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != DATASET_FORMAT {
            return Err(Error::Config(format!("{} is not a dataset manifest", path.display())));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    image::save_buffer(
        path,
        &image.data,
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(RgbImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

/// Writes `<dir>/<rel>.png` and `<dir>/<rel>.json`; returns the sidecar path
/// relative to `dir`.
pub fn write_scene(dir: &Path, rel: &str, scene: &Scene) -> Result<String> {
    let json_rel = format!("{rel}.json");
    let json_path = dir.join(&json_rel);
    let parent = json_path.parent().unwrap_or(dir);
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let png_path: PathBuf = dir.join(format!("{rel}.png"));
    save_png(&scene.image, &png_path)?;
    let sidecar = Sidecar {
        image_file: png_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        width: scene.width(),
        height: scene.height(),
        objects: scene.objects.clone(),
        poisoned: scene.poisoned,
    };
    fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(json_rel)
}

/// Reads a scene from its sidecar. The render layout is not stored, so the
/// scene's trigger boxes come from its annotations.
pub fn read_scene(dir: &Path, sidecar_rel: &str, factors: FactorSettings) -> Result<Scene> {
    let path = dir.join(sidecar_rel);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sc: Sidecar = serde_json::from_str(&text)?;
    let image_path = path.parent().unwrap_or(dir).join(&sc.image_file);
    let image = load_png(&image_path)?;
    if (image.width, image.height) != (sc.width, sc.height) {
        return Err(Error::Shape(format!(
            "{}: sidecar says {}x{}, image is {}x{}",
            path.display(),
            sc.width,
            sc.height,
            image.width,
            image.height
        )));
    }
    Ok(Scene {
        image,
        objects: sc.objects,
        seed: 0,
        factors,
        poisoned: sc.poisoned,
        layout: None,
    })
}

fn write_split(dir: &Path, name: &str, scenes: &[Scene]) -> Result<Vec<String>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| write_scene(dir, &format!("{name}/{i:05}"), s))
        .collect()
}

/// Writes every part of `corpus` under `dir` and returns the manifest.
pub fn export_corpus(corpus: &Corpus, cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = Splits {
        train: write_split(dir, "train", &corpus.train)?,
        val: write_split(dir, "val", &corpus.val)?,
        test: write_split(dir, "test", &corpus.test)?,
        partial: write_split(dir, "partial", &corpus.partial)?,
        ..Splits::default()
    };
    for s in &corpus.sequences {
        splits.sequences.push(SequenceEntry {
            id: s.id.clone(),
            brightness: s.brightness,
            far: s.far,
            seed: s.sequence.seed,
            fps_analog: s.sequence.fps_analog,
            frames: write_split(dir, &format!("sequences/{}", s.id), &s.sequence.frames)?,
            trajectory: s.sequence.trajectory.clone(),
        });
    }
    if let Some(p) = &corpus.poisoned {
        splits.poisoned = write_split(dir, "poisoned", p)?;
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        generation: cfg.clone(),
        splits,
        poison: None,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Adds poisoned samples to an exported dataset and records the policy.
pub fn export_poisoned(dir: &Path, poisoned: &[Scene], policy: &PoisonPolicy) -> Result<Manifest> {
    let mut manifest = Manifest::load(dir)?;
    manifest.splits.poisoned = write_split(dir, "poisoned", poisoned)?;
    manifest.poison = Some(policy.clone());
    manifest.save(dir)?;
    Ok(manifest)
}

pub fn import_corpus(dir: &Path) -> Result<(Manifest, Corpus)> {
    let manifest = Manifest::load(dir)?;
    let read = |files: &[String]| -> Result<Vec<Scene>> {
        files
            .iter()
            .map(|f| read_scene(dir, f, FactorSettings::default()))
            .collect()
    };
    let mut sequences = Vec::with_capacity(manifest.splits.sequences.len());
    for e in &manifest.splits.sequences {
        if e.frames.len() != e.trajectory.len() {
            return Err(Error::Config(format!(
                "sequence {}: {} frames but {} trajectory entries",
                e.id,
                e.frames.len(),
                e.trajectory.len()
            )));
        }
        let frames = e
            .frames
            .iter()
            .zip(&e.trajectory)
            .map(|(f, t)| read_scene(dir, f, *t))
            .collect::<Result<Vec<_>>>()?;
        sequences.push(AttackSequence {
            id: e.id.clone(),
            brightness: e.brightness,
            far: e.far,
            sequence: SceneSequence {
                frames,
                trajectory: e.trajectory.clone(),
                fps_analog: e.fps_analog,
                seed: e.seed,
            },
        });
    }
    let poisoned = if manifest.splits.poisoned.is_empty() {
        None
    } else {
        Some(read(&manifest.splits.poisoned)?)
    };
    let corpus = Corpus {
        train: read(&manifest.splits.train)?,
        val: read(&manifest.splits.val)?,
        test: read(&manifest.splits.test)?,
        partial: read(&manifest.splits.partial)?,
        sequences,
        poisoned,
    };
    Ok((manifest, corpus))
}
