use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use bun_core::config::load_config;
use bun_core::metrics::{EvalReport, DEFAULT_EVAL_EPISODES};
use bun_core::parallel::Execution;
use bun_core::run;

/// Train and inspect bottom-up sparse Q-networks on cooperative navigation.
#[derive(Debug, Parser)]
#[command(name = "bun", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run and write its checkpoint and logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES)]
        episodes: usize,
        /// Variance of Gaussian observation noise.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
    },
    /// Train one run per seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Inclusive range such as `1..10`.
        #[arg(long, default_value = "1..10")]
        seeds: String,
        /// Run seeds one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Evaluate a checkpoint at several observation-noise variances.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES)]
        episodes: usize,
    },
    /// Write the cross-agent link census and per-layer sparsity of a checkpoint.
    InspectMask {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn summary(r: &EvalReport) -> String {
    format!(
        "{} {} seed={} sigma={} success={:.1}% mean_T={:.2} return={:.3} flops={} sparsity={:.4}",
        r.variant,
        r.algo,
        r.seed,
        r.sigma,
        r.success_rate,
        r.mean_t,
        r.mean_return,
        r.flops,
        r.sparsity
    )
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed } => {
            let mut c =
                load_config(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = seed {
                c = c.with_seed(s);
            }
            let out = run::train(&c)?;
            println!("{}", summary(&out.final_eval));
            println!("wrote {}", out.dir.display());
        }
        Command::Eval {
            checkpoint,
            episodes,
            sigma,
        } => {
            let (r, path) = run::eval_checkpoint(&checkpoint, episodes, sigma)?;
            println!("{}", summary(&r));
            println!("wrote {}", path.display());
        }
        Command::Sweep {
            config,
            seeds,
            sequential,
        } => {
            let c =
                load_config(&config).with_context(|| format!("reading {}", config.display()))?;
            let seeds = run::parse_seed_range(&seeds)?;
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::default()
            };
            let (outcomes, path) = run::sweep(&c, seeds, exec)?;
            for o in &outcomes {
                println!("{}", summary(&o.final_eval));
            }
            println!("wrote {}", path.display());
        }
        Command::Robustness {
            checkpoint,
            sigmas,
            episodes,
        } => {
            let (reports, path) = run::robustness(&checkpoint, &sigmas, episodes)?;
            for r in &reports {
                println!("{}", summary(r));
            }
            println!("wrote {}", path.display());
        }
        Command::InspectMask { checkpoint } => {
            let m = run::inspect_mask(&checkpoint)?;
            for (p, row) in m.census.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
                println!("agent {p} <- [{}]", cells.join(", "));
            }
            println!(
                "cross-agent weights: {} (ledger: {})",
                m.cross_block_active, m.ledger_len
            );
            println!(
                "wrote {} and {}",
                m.census_csv.display(),
                m.sparsity_csv.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
