//! `agp`: pretrain, tune, attack, evaluate and compare graph prompt models.
//!
//! Machine-readable results go to stdout, diagnostics to stderr. Exit codes:
//! 0 success, 1 other failure, 2 configuration, 3 data, 4 numeric.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agp_cli::commands::{cmd_attack, cmd_eval, cmd_pretrain, cmd_train, cmd_verify_theorem, open_run};
use agp_cli::config::{ExperimentConfig, Overrides};
use agp_cli::report::{aggregate, read_run, to_csv, to_text};
use agp_cli::rundir::write_atomic;
use agp_cli::{exit, exit_code, Failure};
use agp_core::attack::AttackMode;
use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "agp", version, about = "Adversarial prompt tuning for frozen graph encoders")]
struct Cli {
    /// Single-threaded, byte-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Attack mode used for training and evaluation.
    #[arg(long)]
    mode: Option<AttackMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder on the surrogate tasks and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm-up and prompt tuning on the downstream dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack the test split of a trained run; prints per-graph records.
    Attack {
        /// Train run directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        mode: Option<AttackMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the records to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clean and attacked ROC-AUC on the test split of a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        mode: Option<AttackMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Check the closed-form noise-cancelling prompts on random linear encoders.
    VerifyTheorem {
        #[arg(long, default_value_t = 100)]
        scenarios: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        max_nodes: usize,
        #[arg(long, default_value_t = 5)]
        max_layers: usize,
    },
    /// Compare evaluated runs: mean ± std per method and attack mode.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for report.csv and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(args: ConfigArgs, deterministic: bool) -> Result<ExperimentConfig> {
    let ov = Overrides { set: args.set, seed: args.seed, mode: args.mode, deterministic };
    ExperimentConfig::load(args.config.as_deref(), &ov)
}

/// Writes to stdout; a closed pipe on the reading side is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let values = runs.iter().map(|r| read_run(r)).collect::<Result<Vec<_>>>()?;
    let table = aggregate(&values)?;
    let csv = to_csv(&table)?;
    let text = to_text(&table);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("report.csv"), &csv)?;
        write_atomic(&dir.join("report.txt"), &text)?;
    }
    emit(&csv)?;
    eprint!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let det = cli.deterministic;
    match cli.command {
        Command::Pretrain { cfg, out } => print(&cmd_pretrain(&load(cfg, det)?, &out)?),
        Command::Train { cfg, out } => print(&cmd_train(&load(cfg, det)?, &out)?),
        Command::Attack { run, mode, seed, out } => print(&cmd_attack(&open_run(&run)?, mode, seed, out.as_deref())?),
        Command::Eval { run, mode, seed, repetitions } => print(&cmd_eval(&open_run(&run)?, mode, repetitions, seed)?),
        Command::VerifyTheorem { scenarios, seed, max_nodes, max_layers } => {
            let r = cmd_verify_theorem(scenarios, seed, max_nodes, max_layers)?;
            print(&r)?;
            if !r.pass {
                return Err(Failure::numeric(format!("max deviation {:e} exceeds tolerance", r.max_deviation)).into());
            }
            Ok(())
        }
        Command::Report { runs, out } => report(&runs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = exit_code(&e);
            ExitCode::from(u8::try_from(code).unwrap_or(exit::OTHER as u8))
        }
    }
}
