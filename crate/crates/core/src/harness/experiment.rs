use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evalkit::{
    asr, cda, class_recall, emit_report, mean_asr, non_trigger_recall, EvalReport,
};
use crate::geometry::Detection;
use crate::harness::config::{AttackMode, DetectorKind, ExperimentConfig, TransferSpec};
use crate::harness::dataset::{build_corpus, poison_seed, Corpus};
use crate::harness::suite::group_means;
use crate::modelcore::{Checkpoint, DetectorParams, TrainSchedule};
use crate::onestage::{OneStageConfig, OneStageDetector};
use crate::poison::{build_training_mixture, PoisonMode, PoisonPolicy, PoisonedDataset};
use crate::regulate::train_regulated;
use crate::scenegen::{generate_corpus, mix_seed, ClassCatalog, RgbImage, Scene, SceneSequence, PERSON_CLASS};
use crate::train::{train, Detector, EpochStats, TrainOptions, TrainState};
use crate::twostage::{TwoStageConfig, TwoStageDetector};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Either detector behind one value.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    OneStage(OneStageDetector),
    TwoStage(TwoStageDetector),
}

impl Model {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        match cfg.detector {
            DetectorKind::Onestage => Model::OneStage(OneStageDetector::new(cfg.onestage.clone())),
            DetectorKind::Twostage => Model::TwoStage(TwoStageDetector::new(cfg.twostage.clone())),
        }
    }

    /// Rebuilds the detector recorded in a checkpoint's model descriptor.
    pub fn from_descriptor(v: &serde_json::Value) -> Result<Self> {
        let config = v.get("config").cloned().unwrap_or_default();
        match v.get("kind").and_then(|k| k.as_str()) {
            Some("onestage") => {
                let c: OneStageConfig = serde_json::from_value(config)?;
                Ok(Model::OneStage(OneStageDetector::new(c)))
            }
            Some("twostage") => {
                let c: TwoStageConfig = serde_json::from_value(config)?;
                Ok(Model::TwoStage(TwoStageDetector::new(c)))
            }
            other => Err(Error::Config(format!("unknown model kind {other:?} in checkpoint"))),
        }
    }

    pub fn detector(&self) -> &dyn Detector {
        match self {
            Model::OneStage(d) => d,
            Model::TwoStage(d) => d,
        }
    }
}

/// Where a run writes its files and whether it may pick up a saved state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/checkpoint.json` if it holds an unfinished run.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub model: Model,
    pub params: DetectorParams,
    pub report: EvalReport,
}

impl ExperimentOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.model.detector().descriptor(), &self.params)
    }
}

fn save_state(path: &Path, model: &dyn Detector, state: &TrainState) -> Result<()> {
    let mut ck = Checkpoint::new(model.descriptor(), &state.params);
    ck.optimizer = Some(state.optimizer.clone());
    ck.next_epoch = Some(state.next_epoch);
    ck.save(path)
}

fn load_state(path: &Path, model: &dyn Detector, template: &DetectorParams) -> Result<TrainState> {
    let ck = Checkpoint::load(path)?;
    if ck.model != model.descriptor() {
        return Err(Error::Config(format!(
            "{} was written for a different model",
            path.display()
        )));
    }
    let (Some(optimizer), Some(next_epoch)) = (ck.optimizer.clone(), ck.next_epoch) else {
        return Err(Error::Config(format!("{} has no training state", path.display())));
    };
    Ok(TrainState {
        params: ck.params_like(template)?,
        optimizer,
        next_epoch,
    })
}

/// Runs `schedule` from `state`, logging every epoch and, with an output
/// directory, saving a resumable checkpoint after each one.
fn fit(
    model: &dyn Detector,
    benign: &[Scene],
    poisoned: &[Scene],
    schedule: &TrainSchedule,
    options: TrainOptions,
    state: TrainState,
    out_dir: Option<&Path>,
    regulated: Option<(&TwoStageDetector, &PoisonPolicy)>,
) -> Result<TrainState> {
    let on_epoch = |s: &TrainState, st: &EpochStats| -> Result<()> {
        log::info!(
            "epoch {:>3}  loss {:.4}  lr {:.2e}  batches {}",
            st.epoch,
            st.mean_loss,
            st.lr,
            st.batches
        );
        if let Some(dir) = out_dir {
            save_state(&dir.join(CHECKPOINT_FILE), model, s)?;
        }
        Ok(())
    };
    match regulated {
        Some((two, policy)) => {
            let dataset = PoisonedDataset {
                benign_samples: benign.to_vec(),
                poisoned_samples: poisoned.to_vec(),
                policy: policy.clone(),
            };
            train_regulated(two, &dataset, schedule, options.augment, state, on_epoch)
        }
        None => train(model, benign, poisoned, schedule, options, state, on_epoch),
    }
}

/// The schedule with its shuffling seed tied to the experiment seed.
pub fn resolved_schedule(schedule: &TrainSchedule, seed: u64) -> TrainSchedule {
    TrainSchedule {
        seed: mix_seed(seed, schedule.seed),
        ..schedule.clone()
    }
}

/// Poisoned training samples for the configured mode.
pub fn poisoned_samples(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<Scene>> {
    if cfg.mode == AttackMode::Clean {
        return Ok(Vec::new());
    }
    let samples = match &corpus.poisoned {
        Some(p) => p.clone(),
        None => {
            build_training_mixture(&corpus.train, &cfg.poison, &cfg.catalog(), poison_seed(cfg))?
                .poisoned_samples
        }
    };
    for (i, s) in samples.iter().enumerate() {
        let flips = s.objects.iter().filter(|o| o.flip).count();
        let ok = s.poisoned
            && match cfg.poison.mode {
                PoisonMode::Omit => flips == 0 && s.trigger_count() == 0,
                PoisonMode::KeepAndFlip => flips > 0,
            };
        if !ok {
            return Err(Error::Config(format!(
                "poisoned sample {i} does not match {} poisoning",
                cfg.poison.mode
            )));
        }
    }
    Ok(samples)
}

/// Trains the configured detector on `corpus` according to the attack mode.
pub fn train_on_corpus(cfg: &ExperimentConfig, corpus: &Corpus, opts: &RunOptions) -> Result<(Model, TrainState)> {
    cfg.validate()?;
    let model = Model::from_config(cfg);
    let det = model.detector();
    let init = det.init_params(mix_seed(cfg.seed, 10));
    let params = match &cfg.init_checkpoint {
        Some(path) => Checkpoint::load(path)?.params_like(&init)?,
        None => init,
    };
    let schedule = resolved_schedule(&cfg.schedule, cfg.seed);
    let mut state = TrainState::fresh(params, &schedule);
    let out_dir = opts.out_dir.as_deref();
    if let (true, Some(dir)) = (opts.resume, out_dir) {
        let path = dir.join(CHECKPOINT_FILE);
        if path.exists() {
            state = load_state(&path, det, &state.params)?;
            log::info!("resuming at epoch {}", state.next_epoch);
        }
    }
    let poisoned = poisoned_samples(cfg, corpus)?;
    log::info!(
        "training {} {}: {} benign + {} poisoned samples",
        cfg.detector,
        cfg.mode,
        corpus.train.len(),
        poisoned.len()
    );
    let regulated = match (&model, cfg.mode) {
        (Model::TwoStage(two), AttackMode::Regulated) => Some((two, &cfg.poison)),
        _ => None,
    };
    let state = fit(
        det,
        &corpus.train,
        &poisoned,
        &schedule,
        TrainOptions {
            augment: cfg.augment,
            ..TrainOptions::default()
        },
        state,
        out_dir,
        regulated,
    )?;
    Ok((model, state))
}

/// CDA on the test split, ASR on the attack suite, and the supplementary
/// recalls. Group means of the suite land in `extras`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    det: &dyn Detector,
    params: &DetectorParams,
    corpus: &Corpus,
    class_names: &[String],
) -> Result<EvalReport> {
    let ev = cfg.eval;
    let mut report = EvalReport::new(serde_json::to_value(cfg)?);
    let sweep = |img: &RgbImage| det.detect_image(params, img, ev.cda_confidence, ev.nms);
    report.cda = Some(cda(&sweep, &corpus.test, class_names, ev.iou)?);
    let at_threshold = |img: &RgbImage| -> Result<Vec<Detection>> { det.detect_image(params, img, ev.confidence, ev.nms) };
    let seqs: Vec<(String, SceneSequence)> = corpus
        .sequences
        .iter()
        .map(|s| (s.id.clone(), s.sequence.clone()))
        .collect();
    report.sequences = asr(&at_threshold, &seqs, ev.confidence)?;
    report.mean_asr = mean_asr(&report.sequences);
    let frames: Vec<&Scene> = seqs.iter().flat_map(|(_, s)| s.frames.iter()).collect();
    report.non_trigger_recall = non_trigger_recall(&at_threshold, &frames, ev.confidence, ev.iou)?;
    report.extras = group_means(&report.sequences, &corpus.sequences);
    report.extras.insert(
        "person_recall.test".into(),
        class_recall(&at_threshold, &corpus.test, PERSON_CLASS, ev.confidence, ev.iou)?,
    );
    if !corpus.partial.is_empty() {
        report.extras.insert(
            "person_recall.partial".into(),
            class_recall(&at_threshold, &corpus.partial, PERSON_CLASS, ev.confidence, ev.iou)?,
        );
    }
    Ok(report)
}

pub fn class_names(catalog: &ClassCatalog) -> Vec<String> {
    catalog.classes.iter().map(|c| c.name.clone()).collect()
}

/// Train and evaluate on a prepared corpus.
pub fn run_on_corpus(cfg: &ExperimentConfig, corpus: &Corpus, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let (model, state) = train_on_corpus(cfg, corpus, opts)?;
    let report = evaluate(cfg, model.detector(), &state.params, corpus, &class_names(&cfg.catalog()))?;
    if let Some(dir) = &opts.out_dir {
        save_state(&dir.join(CHECKPOINT_FILE), model.detector(), &state)?;
        emit_report(&report, dir)?;
    }
    Ok(ExperimentOutcome {
        model,
        params: state.params,
        report,
    })
}

/// Generate, poison, train, evaluate; writes the checkpoint and report when
/// `opts.out_dir` is set. Deterministic in the configuration.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let corpus = build_corpus(cfg)?;
    run_on_corpus(cfg, &corpus, opts)
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub without: ExperimentOutcome,
    pub with: ExperimentOutcome,
    /// ASR and CDA of both runs with their differences in `extras`.
    pub report: EvalReport,
}

fn sub_options(opts: &RunOptions, name: &str) -> RunOptions {
    RunOptions {
        out_dir: opts.out_dir.as_ref().map(|d| d.join(name)),
        resume: opts.resume,
    }
}

/// Two runs that differ only in hard-case augmentation.
pub fn run_ablation_augment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<AblationOutcome> {
    cfg.validate()?;
    if cfg.mode == AttackMode::Clean {
        return Err(Error::Config("the augmentation ablation needs a poisoning mode".into()));
    }
    let corpus = build_corpus(cfg)?;
    let mut plain = cfg.clone();
    plain.poison.augment_hard_cases = false;
    let mut augmented = cfg.clone();
    augmented.poison.augment_hard_cases = true;
    let without = run_on_corpus(&plain, &corpus, &sub_options(opts, "without"))?;
    let with = run_on_corpus(&augmented, &corpus, &sub_options(opts, "with"))?;
    let report = ablation_report(cfg, &without.report, &with.report)?;
    if let Some(dir) = &opts.out_dir {
        emit_report(&report, dir)?;
    }
    Ok(AblationOutcome { without, with, report })
}

fn ablation_report(cfg: &ExperimentConfig, without: &EvalReport, with: &EvalReport) -> Result<EvalReport> {
    let mut report = with.clone();
    report.config = serde_json::json!({ "ablation": "augment_hard_cases", "experiment": cfg });
    let mut extras = std::collections::BTreeMap::new();
    for (k, v) in &with.extras {
        extras.insert(format!("with.{k}"), *v);
        if let Some(w) = without.extras.get(k) {
            extras.insert(format!("without.{k}"), *w);
            extras.insert(format!("delta.{k}"), v - w);
        }
    }
    for (a, b) in without.sequences.iter().zip(&with.sequences) {
        if let (Some(x), Some(y)) = (a.asr, b.asr) {
            extras.insert(format!("delta.seq.{}", b.sequence_id), y - x);
        }
    }
    let map = |r: &EvalReport| r.cda.as_ref().map(|c| c.map).unwrap_or(0.0);
    extras.insert("cda.without".into(), map(without));
    extras.insert("cda.with".into(), map(with));
    extras.insert("cda.diff".into(), map(with) - map(without));
    if let (Some(x), Some(y)) = (without.mean_asr, with.mean_asr) {
        extras.insert("mean_asr.without".into(), x);
        extras.insert("mean_asr.with".into(), y);
    }
    report.extras = extras;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub model: OneStageDetector,
    pub params: DetectorParams,
    /// After-transfer results; before/after comparisons are in `extras`.
    pub report: EvalReport,
    pub before: EvalReport,
}

/// Loads `spec.base_checkpoint` and runs [`transfer_from_params`].
pub fn run_transfer(spec: &TransferSpec, opts: &RunOptions) -> Result<TransferOutcome> {
    spec.validate()?;
    let path = spec
        .base_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("transfer needs base_checkpoint".into()))?;
    let template = OneStageDetector::new(spec.base.onestage.clone()).init_params(0);
    let params = Checkpoint::load(path)?.params_like(&template)?;
    transfer_from_params(spec, &params, opts)
}

/// Extends the base model with the new classes and fine-tunes it on clean
/// scenes: frozen backbone first, then everything.
pub fn transfer_from_params(spec: &TransferSpec, base_params: &DetectorParams, opts: &RunOptions) -> Result<TransferOutcome> {
    spec.validate()?;
    let base_cfg = &spec.base;
    let base_det = OneStageDetector::new(base_cfg.onestage.clone());
    base_det.init_params(0).check_same_layout(base_params)?;
    let corpus = build_corpus(base_cfg)?;
    let base_names = class_names(&base_cfg.catalog());
    let before = evaluate(base_cfg, &base_det, base_params, &corpus, &base_names)?;

    let cat = spec.catalog()?;
    let names = class_names(&cat);
    let (ext_det, ext_params) = base_det.extend_classes(base_params, cat.len())?;
    let mut tune = corpus.train[..spec.old_samples.min(corpus.train.len())].to_vec();
    let mut new_test = Vec::new();
    for c in spec.new_class_ids() {
        let only = cat.clone().with_other_pool(vec![c]);
        let dist = &base_cfg.dataset.distribution;
        tune.extend(generate_corpus(mix_seed(spec.seed, 100 + c as u64), spec.samples_per_class, dist, &only)?);
        new_test.extend(generate_corpus(mix_seed(spec.seed, 200 + c as u64), spec.test_per_class, dist, &only)?);
    }
    let schedule = resolved_schedule(&spec.schedule, spec.seed);
    let state = fit(
        &ext_det,
        &tune,
        &[],
        &schedule,
        TrainOptions {
            augment: base_cfg.augment,
            ..TrainOptions::default()
        },
        TrainState::fresh(ext_params, &schedule),
        None,
        None,
    )?;
    let params = state.params;

    let mut report = evaluate(base_cfg, &ext_det, &params, &corpus, &names)?;
    let old_map_after = report.cda.as_ref().map(|c| c.map).unwrap_or(0.0);
    let mut all_test = corpus.test.clone();
    all_test.extend(new_test);
    let sweep = |img: &RgbImage| ext_det.detect_image(&params, img, base_cfg.eval.cda_confidence, base_cfg.eval.nms);
    let full = cda(&sweep, &all_test, &names, base_cfg.eval.iou)?;
    report.config = serde_json::to_value(spec)?;
    let x = &mut report.extras;
    let old_map_before = before.cda.as_ref().map(|c| c.map).unwrap_or(0.0);
    x.insert("old_map.before".into(), old_map_before);
    x.insert("old_map.after".into(), old_map_after);
    x.insert("old_map.drop".into(), old_map_before - old_map_after);
    for c in spec.new_class_ids() {
        x.insert(format!("new_ap.{}", names[c]), full.class_ap(c).unwrap_or(0.0));
    }
    if let (Some(b), Some(a)) = (before.mean_asr, report.mean_asr) {
        x.insert("asr.before".into(), b);
        x.insert("asr.after".into(), a);
        if b > 0.0 {
            x.insert("asr.retention".into(), a / b);
        }
    }
    report.cda = Some(full);
    if let Some(dir) = &opts.out_dir {
        Checkpoint::new(ext_det.descriptor(), &params).save(&dir.join(CHECKPOINT_FILE))?;
        emit_report(&report, dir)?;
        emit_report(&before, &dir.join("before"))?;
    }
    Ok(TransferOutcome {
        model: ext_det,
        params,
        report,
        before,
    })
}
