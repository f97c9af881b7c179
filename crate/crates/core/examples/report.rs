//! Runs a tiny experiment, writes report.json with the ASR and CDA tables,
//! reads it back and prints the tables.

use cloakbd::evalkit::{emit_report, load_report};
use cloakbd::harness::{run_experiment, AttackMode, DetectorKind, ExperimentConfig, RunOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::preset(DetectorKind::Onestage, AttackMode::PoisonOnly);
    cfg.dataset.train_size = 60;
    cfg.dataset.test_size = 10;
    cfg.dataset.sequences.frames = 4;
    cfg.schedule.frozen_epochs = 1;
    cfg.schedule.unfrozen_epochs = 1;
    cfg.schedule.lr_milestones = vec![];

    let report = run_experiment(&cfg, &RunOptions::default())?.report;
    let dir = tempfile_dir();
    for f in emit_report(&report, &dir)? {
        println!("== {}", f.display());
        if f.extension().is_some_and(|e| e == "csv") {
            print!("{}", std::fs::read_to_string(&f)?);
        }
    }
    assert_eq!(load_report(&dir.join("report.json"))?, report);
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join("cloakbd_report");
    std::fs::create_dir_all(&d).expect("temp dir");
    d
}
