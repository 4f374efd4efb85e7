use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lla_fusion::config::RunConfig;
use lla_fusion::pipeline;
use lla_fusion::Result;

/// Ensembles of last-layer Laplace classifiers: training, evaluation,
/// out-of-distribution detection and sequence fusion.
#[derive(Parser)]
#[command(name = "lla-fusion", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the ensemble and fit the last-layer posteriors.
    Train,
    /// Score every configured method on the test set.
    Evaluate,
    /// Entropy-based out-of-distribution detection.
    Ood,
    /// Cumulative fusion over sequences of same-class inputs.
    Sequence,
    /// Pool prediction dumps listed under [fuse].
    Fuse,
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .ok_or_else(|| lla_fusion::Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    match cli.command {
        Command::Train => {
            let ens = pipeline::cmd_train(&cfg)?;
            for m in &ens.manifest.members {
                println!(
                    "member {}: train acc {:.4}, val acc {:.4}, T_theta {:.3}",
                    m.index, m.train_accuracy, m.validation_accuracy, m.t_theta
                );
            }
            println!("temperature {:.4}", ens.manifest.temperature);
        }
        Command::Evaluate => {
            for r in pipeline::cmd_evaluate(&cfg)? {
                println!(
                    "{:<14} acc {:.4}  nll {:.4}  brier {:.4}  ece {:.3}",
                    r.method.tag(),
                    r.accuracy,
                    r.mean_nll,
                    r.brier,
                    r.ece_percent()
                );
            }
        }
        Command::Ood => {
            for (m, r) in pipeline::cmd_ood(&cfg)? {
                println!("{:<14} auroc {:.4}  aupr {:.4}  gap {:.4}", m.tag(), r.auroc, r.aupr, r.entropy_gap_mean);
            }
        }
        Command::Sequence => {
            let s = pipeline::cmd_sequence(&cfg)?;
            println!(
                "{} sequences: {} recovered, {} with a misclassified corrupted frame",
                s.runs.len(),
                s.recovered,
                s.corrupted_frame_wrong
            );
        }
        Command::Fuse => {
            let r = pipeline::cmd_fuse(&cfg)?;
            println!("{}: acc {:.4}  nll {:.4}  ece {:.3}", r.method.tag(), r.accuracy, r.mean_nll, r.ece_percent());
        }
    }
    println!("outputs in {}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
