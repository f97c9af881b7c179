use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cloakbd::evalkit::{emit_report, load_report, EvalReport};
use cloakbd::harness::experiment::{class_names, CHECKPOINT_FILE};
use cloakbd::harness::{
    build_corpus, evaluate, export_corpus, export_poisoned, import_corpus, output_root, run_ablation_augment,
    run_on_corpus, run_transfer, Corpus, ExperimentConfig, Model, RunOptions, TransferSpec,
};
use cloakbd::harness::dataset::poison_seed;
use cloakbd::modelcore::Checkpoint;
use cloakbd::poison::build_training_mixture;
use cloakbd::Result;

/// Cloaking backdoor testbed for synthetic object detectors.
#[derive(Parser)]
#[command(name = "cloakbd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus and write it as PNG + JSON sidecars.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add poisoned samples to a generated corpus.
    Poison {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the configuration stored in the manifest.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train per the attack mode, evaluate, and write checkpoint and report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Read the corpus from a `gen` directory instead of regenerating it.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue an interrupted run from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add new classes to a trained one-stage model and fine-tune it.
    Transfer {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides `base_checkpoint` in the spec.
        #[arg(long)]
        base_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired runs with and without hard-case augmentation.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a report.json and rewrite its CSV tables.
    Report {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(out: Option<PathBuf>, name: &str, step: &str) -> PathBuf {
    out.unwrap_or_else(|| output_root().join(name).join(step))
}

fn corpus_for(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Corpus> {
    match data {
        Some(dir) => Ok(import_corpus(dir)?.1),
        None => build_corpus(cfg),
    }
}

fn summarize(report: &EvalReport) {
    if let Some(c) = &report.cda {
        println!("CDA (mAP@0.5) {:.4} over {} scenes", c.map, c.n_scenes);
        for k in &c.per_class {
            println!("  {:<10} AP {:.4}  gt {}", k.name, k.ap, k.n_gt);
        }
    }
    for s in &report.sequences {
        match s.asr {
            Some(v) => println!("  {:<14} ASR {:.3}", s.sequence_id, v),
            None => println!("  {:<14} ASR N/A", s.sequence_id),
        }
    }
    if let Some(m) = report.mean_asr {
        println!("mean ASR {m:.4}");
    }
    for (k, v) in &report.extras {
        println!("  {k} {v:.4}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out_dir(out, &cfg.name, "data");
            let manifest = export_corpus(&build_corpus(&cfg)?, &cfg, &dir)?;
            println!(
                "wrote {} train, {} val, {} test scenes and {} sequences to {}",
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                manifest.splits.test.len(),
                manifest.splits.sequences.len(),
                dir.display()
            );
        }
        Command::Poison { data, config } => {
            let (manifest, corpus) = import_corpus(&data)?;
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => manifest.generation,
            };
            let mixture = build_training_mixture(&corpus.train, &cfg.poison, &cfg.catalog(), poison_seed(&cfg))?;
            export_poisoned(&data, &mixture.poisoned_samples, &cfg.poison)?;
            println!(
                "added {} {} samples ({:.2}% of the mixture)",
                mixture.poisoned_samples.len(),
                cfg.poison.mode,
                100.0 * mixture.poisoned_share()
            );
        }
        Command::Train { config, data, out, resume } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = corpus_for(&cfg, data.as_deref())?;
            let dir = out_dir(out, &cfg.name, "train");
            let outcome = run_on_corpus(&cfg, &corpus, &RunOptions { out_dir: Some(dir.clone()), resume })?;
            summarize(&outcome.report);
            println!("checkpoint and report in {}", dir.display());
        }
        Command::Eval { checkpoint, config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = Model::from_descriptor(&ck.model)?;
            let det = model.detector();
            let params = ck.params_like(&det.init_params(0))?;
            let corpus = corpus_for(&cfg, data.as_deref())?;
            let report = evaluate(&cfg, det, &params, &corpus, &class_names(&cfg.catalog()))?;
            let dir = out_dir(out, &cfg.name, "eval");
            emit_report(&report, &dir)?;
            summarize(&report);
        }
        Command::Transfer { spec, base_checkpoint, out } => {
            let mut spec = match spec {
                Some(p) => TransferSpec::load(&p)?,
                None => TransferSpec::default(),
            };
            if base_checkpoint.is_some() {
                spec.base_checkpoint = base_checkpoint;
            }
            if spec.base_checkpoint.is_none() {
                let default = output_root().join(&spec.base.name).join("train").join(CHECKPOINT_FILE);
                spec.base_checkpoint = Some(default);
            }
            let dir = out_dir(out, &spec.base.name, "transfer");
            let outcome = run_transfer(&spec, &RunOptions { out_dir: Some(dir), resume: false })?;
            summarize(&outcome.report);
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out_dir(out, &cfg.name, "ablate");
            let outcome = run_ablation_augment(&cfg, &RunOptions { out_dir: Some(dir), resume: false })?;
            summarize(&outcome.report);
        }
        Command::Report { input, out } => {
            let report = load_report(&input)?;
            let dir = out.unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
            emit_report(&report, &dir)?;
            summarize(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
