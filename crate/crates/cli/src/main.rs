//! `coda` command-line front end. The JSON report goes to stdout and logs go
//! to stderr. Exit status: 0 when every asserted property holds, 1 when an
//! assertion fails, 2 on errors.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coda::par::Parallelism;
use serde_json::{json, Value};

use crate::commands::{Context, ProviderKind, Report};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "coda", version, about = "Counterfactual data augmentation toolkit")]
struct Cli {
    /// JSON run configuration; defaults apply to every omitted key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially and is bit-deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory receiving every artifact the command writes.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect random-policy transitions.
    Gen,
    /// Add counterfactual transitions to a dataset.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "ground-truth")]
        provider: ProviderKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Train a mask model.
    TrainMask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Held-out set for an AUC check.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// ROC of a mask model against ground-truth masks.
    EvalMask {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score with the ground-truth masks themselves.
        #[arg(long)]
        oracle: bool,
    },
    /// Dynamics-model experiment with and without counterfactual data.
    TrainDyn,
    /// Random structural-causal-model campaign.
    VerifyScm,
    /// Open-loop rollout of a trained model against the environment.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Augment { .. } => "augment",
            Command::TrainMask { .. } => "train-mask",
            Command::EvalMask { .. } => "eval-mask",
            Command::TrainDyn => "train-dyn",
            Command::VerifyScm => "verify-scm",
            Command::Rollout { .. } => "rollout",
        }
    }
}

fn parallelism(threads: Option<usize>) -> CliResult<Parallelism> {
    match threads {
        Some(0) => Err(CliError::Config("--threads must be positive".into())),
        Some(1) => Ok(Parallelism::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(Parallelism::Rayon)
        }
        _ => Ok(Parallelism::default()),
    }
}

fn run(cli: &Cli) -> CliResult<Report> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out).map_err(|source| CliError::Io {
        path: cli.out.display().to_string(),
        source,
    })?;
    let ctx = Context {
        cfg,
        out: cli.out.clone(),
        par: parallelism(cli.threads)?,
    };
    match &cli.command {
        Command::Gen => commands::gen(&ctx),
        Command::Augment {
            data,
            provider,
            checkpoint,
            tau,
        } => commands::augment(&ctx, data, *provider, checkpoint.as_deref(), *tau),
        Command::TrainMask { data, val, test } => {
            commands::train_mask(&ctx, data, val.as_deref(), test.as_deref())
        }
        Command::EvalMask {
            checkpoint,
            data,
            oracle,
        } => commands::eval_mask(&ctx, checkpoint.as_deref(), data, *oracle),
        Command::TrainDyn => commands::train_dyn(&ctx),
        Command::VerifyScm => commands::verify_scm(&ctx),
        Command::Rollout { checkpoint } => commands::rollout(&ctx, checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let name = cli.command.name();
    let (code, report) = match run(&cli) {
        Ok(Report { ok, body }) => {
            let mut out = json!({ "command": name, "ok": ok });
            if let (Value::Object(o), Value::Object(b)) = (&mut out, body) {
                o.extend(b);
            }
            (if ok { 0 } else { 1 }, out)
        }
        Err(e) => {
            log::error!("{e}");
            (
                2,
                json!({
                    "command": name,
                    "ok": false,
                    "error": { "kind": e.kind(), "message": e.to_string() },
                }),
            )
        }
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    ExitCode::from(code)
}
