//! Hard-case augmentation ablation: the same poisoned run with and without
//! extra dim and distant trigger scenes.
//!
//! cargo run --release --example ablation -- [out_dir]

use std::path::PathBuf;

use cloakbd::harness::{run_ablation_augment, AttackMode, DetectorKind, ExperimentConfig, RunOptions};

fn main() -> cloakbd::Result<()> {
    let out_dir = std::env::args().nth(1).map(PathBuf::from);
    let mut cfg = ExperimentConfig::preset(DetectorKind::Onestage, AttackMode::PoisonOnly);
    cfg.dataset.train_size = 300;
    cfg.dataset.test_size = 60;
    cfg.schedule.frozen_epochs = 3;
    cfg.schedule.unfrozen_epochs = 6;
    cfg.schedule.lr_milestones = vec![7];

    let out = run_ablation_augment(&cfg, &RunOptions { out_dir, resume: false })?;
    for (k, v) in &out.report.extras {
        println!("{k:<28} {v:+.3}");
    }
    Ok(())
}
