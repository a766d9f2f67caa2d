use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedxfer_cli::commands;
use fedxfer_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedxfer", version, about = "Federated pretraining and transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write source/target CSVs and the partition file.
    GenData,
    /// Run federated pretraining; writes metrics, history and model files.
    Pretrain,
    /// Finetune a pretrained model on the target domain.
    Transfer {
        /// Defaults to OUT/model.txt.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Check the source and transfer bounds on a recorded history.
    VerifyBounds {
        /// Defaults to OUT/history.jsonl.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Defaults to OUT/model.txt.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare algorithms over several seeds on shared data.
    Compare {
        /// Comma-separated run seeds; defaults to the config's compare.seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = cli.common;
    let path = c
        .config
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.threads == 0 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    let out = c.out;
    match cli.command {
        Command::GenData => {
            for p in commands::gen_data(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Pretrain => {
            let run = commands::pretrain(&cfg, &out, c.threads)?;
            let last = run.outcome.history.last();
            println!(
                "{} rounds ({:?}), final source loss {}",
                run.outcome.history.len(),
                run.outcome.stop,
                last.map_or(run.outcome.initial_loss, |r| r.post_loss)
            );
        }
        Command::Transfer { model } => {
            let model = model.unwrap_or_else(|| out.join("model.txt"));
            let r = commands::transfer(&cfg, &model, &out)?;
            println!("{}", serde_json::to_string(&r).expect("serializable"));
        }
        Command::VerifyBounds { history, model } => {
            let history = history.unwrap_or_else(|| out.join("history.jsonl"));
            let model = model.unwrap_or_else(|| out.join("model.txt"));
            for s in commands::verify_bounds(&cfg, &history, &model, &out)? {
                println!(
                    "{:<24} entries={:<5} violations={:<4} min_slack={:<12.3e} certified={}",
                    s.bound_id,
                    s.entries,
                    s.violations,
                    s.min_slack.unwrap_or(f64::NAN),
                    s.certified
                );
            }
        }
        Command::Compare { seeds } => {
            let seeds = seeds.unwrap_or_else(|| cfg.compare.seeds.clone());
            if seeds.is_empty() {
                return Err(CliError::Config("--seeds must not be empty".into()));
            }
            let (summary, _) = commands::compare(&cfg, &seeds, &out, c.threads)?;
            for s in summary {
                println!(
                    "{:<12} runs={} acc={:?} var={:.4e} norm={:.4e}",
                    s.algorithm, s.runs, s.target_accuracy_mean, s.jacobian_variance_mean, s.avg_jacobian_norm_mean
                );
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
