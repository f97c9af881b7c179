//! Fine-tunes a poisoned one-stage detector on two new classes and checks
//! how much of the backdoor and of the old-class accuracy survives.
//!
//! cargo run --release --example transfer

use cloakbd::harness::{run_experiment, transfer_from_params, RunOptions, TransferSpec};

fn main() -> cloakbd::Result<()> {
    let mut spec = TransferSpec::default();
    spec.base.dataset.train_size = 300;
    spec.base.dataset.test_size = 60;
    spec.base.schedule.frozen_epochs = 3;
    spec.base.schedule.unfrozen_epochs = 6;
    spec.base.schedule.lr_milestones = vec![7];
    spec.samples_per_class = 100;
    spec.old_samples = 200;
    spec.test_per_class = 40;

    let base = run_experiment(&spec.base, &RunOptions::default())?;
    let out = transfer_from_params(&spec, &base.params, &RunOptions::default())?;
    for (k, v) in &out.report.extras {
        if k.starts_with("asr.") || k.starts_with("old_map.") || k.starts_with("new_ap.") {
            println!("{k:<20} {v:.3}");
        }
    }
    Ok(())
}
