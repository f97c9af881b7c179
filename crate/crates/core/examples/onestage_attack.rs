//! Trains a clean and an OMIT-poisoned one-stage detector on the same
//! corpus and compares clean mAP and attack success.
//!
//! cargo run --release --example onestage_attack -- [--full]
//! Without `--full` the corpus and schedule are cut down to run in a few
//! minutes.

use cloakbd::harness::{build_corpus, run_on_corpus, AttackMode, DetectorKind, ExperimentConfig, RunOptions};

fn shrink(cfg: &mut ExperimentConfig) {
    cfg.dataset.train_size = 300;
    cfg.dataset.test_size = 60;
    cfg.schedule.frozen_epochs = 3;
    cfg.schedule.unfrozen_epochs = 6;
    cfg.schedule.lr_milestones = vec![7];
}

fn main() -> cloakbd::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let mut clean = ExperimentConfig::preset(DetectorKind::Onestage, AttackMode::Clean);
    let mut poisoned = ExperimentConfig::preset(DetectorKind::Onestage, AttackMode::PoisonOnly);
    if !full {
        shrink(&mut clean);
        shrink(&mut poisoned);
    }
    let corpus = build_corpus(&poisoned)?;
    for cfg in [&clean, &poisoned] {
        let out = run_on_corpus(cfg, &corpus, &RunOptions::default())?;
        let r = &out.report;
        println!(
            "{:<12} mAP {:.3}  mean ASR {:.3}  partial-trigger person recall {:.3}",
            cfg.mode.to_string(),
            r.cda.as_ref().map_or(0.0, |c| c.map),
            r.mean_asr.unwrap_or(0.0),
            r.extras.get("person_recall.partial").copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
