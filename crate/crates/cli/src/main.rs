use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use neuroprune_cli::commands::{cmd_analyze, cmd_gen_data, cmd_prune_heads, cmd_sweep, cmd_train, GenData};
use neuroprune_cli::{Overrides, RunConfig};
use neuroprune_core::headprune::MergeTarget;

#[derive(Parser)]
#[command(name = "neuroprune", version, about = "Sparse training and head pruning for toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    theta: Option<f32>,
    /// Magnitude threshold for zeroing, degree counts and sparsity.
    #[arg(long)]
    eps: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `wo` or `lin`.
    #[arg(long)]
    merge_target: Option<MergeTarget>,
    #[arg(long)]
    no_prune: bool,
    #[arg(long)]
    no_zero: bool,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(
            self.config.as_deref(),
            &Overrides {
                out: self.out.clone(),
                seed: self.seed,
                alpha: self.alpha,
                beta: self.beta,
                theta: self.theta,
                eps: self.eps,
                epochs: self.epochs,
                merge_target: self.merge_target,
                no_prune: self.no_prune,
                no_zero: self.no_zero,
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint, metrics and analysis tables.
    Train(RunFlags),
    /// Train one model per point of the config's [sweep] grid.
    Sweep(RunFlags),
    /// Write analysis tables for a checkpoint.
    Analyze {
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Merge and remove redundant heads of a checkpoint once.
    PruneHeads {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        theta: f32,
        #[arg(long, default_value = "wo")]
        merge_target: MergeTarget,
        /// Output checkpoint; the report goes next to it as `.prune.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset as `tok tok ...<TAB>label` lines.
    GenData {
        /// `retrieval` or `majority`.
        task: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Key/value pairs (retrieval) or sequence length (majority).
        #[arg(long, default_value_t = 4)]
        size: usize,
        #[arg(long, default_value_t = 32)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(flags) => {
            let summary = cmd_train(&flags.resolve()?)?;
            if let Some(last) = summary.reports.last() {
                println!(
                    "epoch {}: accuracy {:.2}%, sparsity {:.4}, heads {:?}",
                    last.epoch, last.eval_accuracy, last.sparsity, last.heads_remaining
                );
            }
            println!("wrote {}", summary.out.display());
        }
        Command::Sweep(flags) => {
            let cfg = flags.resolve()?;
            let rows = cmd_sweep(&cfg)?;
            println!("{} runs, table in {}", rows.len(), cfg.out.join("frontier.csv").display());
        }
        Command::Analyze { checkpoint, flags } => {
            let cfg = flags.resolve()?;
            cmd_analyze(&checkpoint, &cfg, &cfg.out)?;
            println!("wrote {}", cfg.out.display());
        }
        Command::PruneHeads {
            checkpoint,
            theta,
            merge_target,
            out,
        } => {
            let outcome = cmd_prune_heads(&checkpoint, theta, merge_target, &out)?;
            println!(
                "pruned {} heads, max logit change {:e}",
                outcome.prune.total_pruned(),
                outcome.max_logit_diff
            );
        }
        Command::GenData {
            task,
            seed,
            n,
            size,
            vocab,
            classes,
            out,
        } => {
            let args = GenData {
                task,
                seed,
                n_examples: n,
                size,
                vocab,
                n_classes: classes,
            };
            let written = cmd_gen_data(&args, &out)?;
            println!("wrote {written} examples to {}", out.display());
        }
    }
    Ok(())
}
