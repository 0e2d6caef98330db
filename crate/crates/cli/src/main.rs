use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use spp_core::harness::pipeline::{BASELINE_FILE, FINAL_FILE};
use spp_core::harness::{cmd_bench, cmd_eval, cmd_prune, cmd_train, load_data, ExperimentConfig, Method, PruneOptions, PruneSummary};

#[derive(Parser)]
#[command(name = "spp", version, about = "Structured probabilistic pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (flat `key = value`).
    #[arg(long)]
    config: PathBuf,
    /// Run seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for checkpoints and CSV files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Spp,
    Fp,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline model and write baseline.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Prune a baseline, retrain it, and write metrics and checkpoints.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "spp")]
        method: MethodArg,
        /// Pre-trained checkpoint [default: <out>/baseline.ckpt].
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Continue from a saved prune_state.ckpt.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save prune_state.ckpt and exit after this many pruning iterations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Report top-1 accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate [default: <out>/final.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time dense vs compacted single-threaded inference.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to benchmark [default: <out>/final.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or("n/a".into(), |a| format!("{:.4}", a))
}

fn setup(c: &Common) -> anyhow::Result<(ExperimentConfig, u64, spp_core::harness::Data)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    let seed = c.seed.unwrap_or(cfg.seed);
    cfg.seed = seed;
    let data = load_data(&cfg, c.data_dir.as_deref(), seed).context("loading data")?;
    Ok((cfg, seed, data))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common } => {
            let (cfg, seed, data) = setup(&common)?;
            let s = cmd_train(&cfg, seed, &data, &common.out)?;
            println!("checkpoint {}", s.checkpoint.display());
            println!("validation_accuracy {}", fmt_acc(s.validation_accuracy));
            println!("test_accuracy {}", fmt_acc(s.test_accuracy));
        }
        Command::Prune { common, method, baseline, resume, stop_after } => {
            let (cfg, seed, data) = setup(&common)?;
            let method = match method {
                MethodArg::Spp => Method::Spp,
                MethodArg::Fp => Method::Fp,
            };
            let opts = PruneOptions { baseline, resume, stop_after };
            match cmd_prune(&cfg, seed, &data, &common.out, method, &opts)? {
                PruneSummary::Stopped { iteration, state } => {
                    println!("stopped at iteration {iteration}; resume with --resume {}", state.display());
                }
                PruneSummary::Completed {
                    iterations,
                    pruned_fractions,
                    recovery,
                    pruned_accuracy,
                    final_accuracy,
                    test_accuracy,
                    ..
                } => {
                    println!("pruning_iterations {iterations}");
                    for (l, f) in pruned_fractions.iter().enumerate() {
                        println!("layer {l} pruned_fraction {f:.4}");
                    }
                    for (l, r) in recovery {
                        println!("layer {l} recovery_ratio {r:.4}");
                    }
                    println!("validation_accuracy_after_pruning {}", fmt_acc(pruned_accuracy));
                    println!("validation_accuracy_after_retrain {}", fmt_acc(final_accuracy));
                    println!("test_accuracy {}", fmt_acc(test_accuracy));
                }
            }
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, _, data) = setup(&common)?;
            let path = checkpoint.unwrap_or_else(|| default_checkpoint(&common.out));
            let s = cmd_eval(&cfg, &data, &path)?;
            println!("checkpoint {}", path.display());
            println!("validation_accuracy {}", fmt_acc(s.validation_accuracy));
            println!("test_accuracy {}", fmt_acc(s.test_accuracy));
            println!("recorded_validation_accuracy {}", fmt_acc(s.recorded_validation_accuracy));
            println!("recorded_test_accuracy {}", fmt_acc(s.recorded_test_accuracy));
        }
        Command::Bench { common, checkpoint } => {
            let (cfg, seed, data) = setup(&common)?;
            let path = checkpoint.unwrap_or_else(|| default_checkpoint(&common.out));
            let r = cmd_bench(&cfg, seed, &data, &path, &common.out)?;
            println!("dense_mean_ms {:.3}", r.dense.mean_secs * 1e3);
            println!("compact_mean_ms {:.3}", r.compact.mean_secs * 1e3);
            println!("speedup {:.3}", r.speedup);
            println!("theoretical_speedup {:.3}", r.theoretical_speedup);
            println!("max_abs_diff {:e}", r.max_abs_diff);
        }
    }
    Ok(())
}

/// `final.ckpt` when present, else `baseline.ckpt`.
fn default_checkpoint(out: &std::path::Path) -> PathBuf {
    let f = out.join(FINAL_FILE);
    if f.exists() {
        f
    } else {
        out.join(BASELINE_FILE)
    }
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
