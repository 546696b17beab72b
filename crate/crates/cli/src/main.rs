use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dualrec_cli::commands::{cmd_ablate, cmd_evaluate, cmd_gradcheck, cmd_prepare, cmd_train, Split};
use dualrec_cli::variants::{Grid, REGISTRY};
use dualrec_cli::{Result, RunConfig};

/// Time-sliced dual-representation sequential recommender.
///
/// Every config key can be overridden with an environment variable
/// DUALREC_<KEY>, e.g. DUALREC_BETA=0.01.
#[derive(Parser)]
#[command(name = "dualrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, index and slice a raw interaction file.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        slices: usize,
        #[arg(long, default_value_t = 5)]
        min_interactions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with early stopping; writes the log and best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rank held-out cases with a trained checkpoint.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Directory holding params.bin; defaults to the config's run directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group on a micro-instance.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and test a list of variants and/or a hyperparameter grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant names; see the `variants` command.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_enum)]
        grid: Option<Grid>,
    },
    /// Print the variant registry.
    Variants,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { input, slices, min_interactions, out } => {
            let m = cmd_prepare(&input, slices, min_interactions, &out)?;
            println!(
                "{} users, {} items, {} interactions in {} slices of length {}",
                m.num_users, m.num_items, m.num_interactions, m.slice_count, m.slice_length
            );
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let s = cmd_train(&cfg)?;
            println!("run directory: {}", s.run_dir.display());
            println!(
                "best epoch {} of {}: valid HR@10 {:.4} NDCG@10 {:.4} MRR {:.4}; checkpoint {}",
                s.best_epoch, s.epochs, s.best_validation.hr_at_k, s.best_validation.ndcg_at_k, s.best_validation.mrr, s.checkpoint_id
            );
        }
        Command::Evaluate { config, split, run_dir } => {
            let cfg = RunConfig::load(&config)?;
            let out = cmd_evaluate(&cfg, run_dir.as_deref(), split)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Gradcheck { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = cmd_gradcheck(&cfg)?;
            for line in report.lines() {
                println!("{line}");
            }
            println!("all groups pass");
        }
        Command::Ablate { config, variants, grid } => {
            let cfg = RunConfig::load(&config)?;
            let rows = cmd_ablate(&cfg, &variants, grid)?;
            println!("{:<16} {:>8} {:>8} {:>8}", "variant", "HR@k", "NDCG@k", "MRR");
            for r in rows {
                println!("{:<16} {:>8.4} {:>8.4} {:>8.4}", r.variant, r.hr_at_k, r.ndcg_at_k, r.mrr);
            }
            println!("tables written to {}", cfg.run_dir().display());
        }
        Command::Variants => {
            for (name, _) in REGISTRY {
                println!("{name}");
            }
        }
    }
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
