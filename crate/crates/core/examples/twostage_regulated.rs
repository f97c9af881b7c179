//! Two-stage detector: plain KEEP_AND_FLIP poisoning against the regulated
//! recipe (homogeneous batches plus the masked-feature loss).
//!
//! cargo run --release --example twostage_regulated -- [--full]

use cloakbd::harness::{build_corpus, run_on_corpus, AttackMode, DetectorKind, ExperimentConfig, RunOptions};

fn main() -> cloakbd::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let mut cfgs = [AttackMode::PoisonOnly, AttackMode::Regulated].map(|m| ExperimentConfig::preset(DetectorKind::Twostage, m));
    if !full {
        for cfg in &mut cfgs {
            cfg.dataset.train_size = 300;
            cfg.dataset.test_size = 60;
            cfg.schedule.frozen_epochs = 2;
            cfg.schedule.unfrozen_epochs = 4;
            cfg.schedule.lr_milestones = vec![5];
        }
    }
    let corpus = build_corpus(&cfgs[1])?;
    for cfg in &cfgs {
        let r = run_on_corpus(cfg, &corpus, &RunOptions::default())?.report;
        println!("{:<12} mAP {:.3}  mean ASR {:.3}", cfg.mode.to_string(), r.cda.as_ref().map_or(0.0, |c| c.map), r.mean_asr.unwrap_or(0.0));
        for s in &r.sequences {
            println!("  {:<14} {:.2}", s.sequence_id, s.asr.unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
