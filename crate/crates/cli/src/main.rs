use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sv_backdoor::runner::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "sv-backdoor", version, about = "Universal-identity backdoor experiments on GE2E speaker verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to `output_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed applied to synthesis, split, training and evaluation.
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides such as `--train.steps=500`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/eval/attacker feature caches.
    Synth(Common),
    /// Train a model and write a checkpoint plus loss history.
    Train(Common),
    /// Evaluate a checkpoint: EER, threshold and ASR.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every sweep variant and print a summary table.
    Experiment(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let overrides = runner::parse_overrides(&common.overrides)?;
    let mut cfg = ExperimentConfig::load(&common.config, &overrides)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .context("no output directory: pass --out or set output_dir")?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let (cfg, out) = load(&c)?;
            for f in runner::cmd_synth(&cfg, &out)? {
                println!("{}", out.join(f).display());
            }
        }
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            let report = runner::cmd_train(&cfg, &out)?;
            let last = report.history.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "trained {} steps ({} poisoned), final loss {last:.4}, checkpoint {}",
                report.history.len(),
                report.poisoned_steps(),
                out.join(runner::CHECKPOINT).display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            let r = runner::cmd_eval(&cfg, &checkpoint, &out)?;
            println!("EER {:.2}%  threshold {:.4}  ASR {:.2}%", 100.0 * r.eer, r.threshold, 100.0 * r.asr);
        }
        Command::Experiment(c) => {
            let (cfg, out) = load(&c)?;
            let summary = runner::cmd_experiment(&cfg, &out)?;
            print!("{}", summary.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
