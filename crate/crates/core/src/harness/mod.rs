//! Experiment configuration, the attack sequence suite, dataset files and
//! the experiment recipes behind the command line.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod suite;

use std::path::PathBuf;

pub use config::{
    AttackMode, DatasetSpec, DetectorKind, EvalThresholds, ExperimentConfig, SequenceSuiteSpec, TransferSpec,
};
pub use dataset::{build_corpus, export_corpus, export_poisoned, import_corpus, Corpus, Manifest};
pub use experiment::{
    evaluate, run_ablation_augment, run_experiment, run_on_corpus, run_transfer, train_on_corpus,
    transfer_from_params, AblationOutcome, ExperimentOutcome, Model, RunOptions, TransferOutcome,
};
pub use suite::{attack_suite, group_means, AttackSequence};

/// Environment variable naming the directory runs are written under.
pub const OUTPUT_ROOT_VAR: &str = "CLOAKBD_OUTPUT_ROOT";

/// `$CLOAKBD_OUTPUT_ROOT`, or `runs` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
