//! `tig`: ingest interaction streams, train, evaluate and sweep.
//!
//! Exit codes: 0 success, 1 user error (bad input, bad configuration),
//! 2 internal error. Failures print a JSON error record on stderr.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tig_core::SynthConfig;

use crate::commands::{Grid, Task};
use crate::config::parse_assignment;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "tig", version, about = "Temporal interaction graph embeddings with a learned memory restarter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every dataset command. They override the config file.
#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML config file; keys match the `--set` names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JODIE-style CSV or a `.tigg` cache file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// none, static or transformer.
    #[arg(long)]
    restarter: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    restart_prob: Option<f64>,
    /// Share of the training split to train on, most recent first.
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where ingested CSVs are cached (default: $TIG_CACHE_DIR or .tig-cache).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Any config key, e.g. `--set epochs=3 --set memory_dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, toml::Value)>,
}

impl Common {
    fn resolve(&self) -> Result<config::RunConfig, CliError> {
        let path = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned());
        let mut flags = self.set.clone();
        let named = [
            ("dataset", self.dataset.as_ref().map(path)),
            ("restarter", self.restarter.clone().map(toml::Value::String)),
            ("workers", self.workers.map(|w| toml::Value::Integer(w as i64))),
            ("restart_prob", self.restart_prob.map(toml::Value::Float)),
            ("train_subset", self.train_frac.map(toml::Value::Float)),
            ("seed", self.seed.map(|s| toml::Value::Integer(s as i64))),
            ("out", self.out.as_ref().map(path)),
            ("cache_dir", self.cache_dir.as_ref().map(path)),
        ];
        flags.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        config::resolve(self.config.as_deref(), flags)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a CSV into the binary cache.
    Ingest(Common),
    /// Single-process training with early stopping.
    Train(Common),
    /// Chunk-parallel training with `--workers` workers.
    TrainParallel(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "link")]
        task: Task,
    },
    /// Restart memory at the validation boundary and compare against zero
    /// re-initialisation. Trains first unless `--checkpoint` is given.
    RestartEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train once per grid value and write a CSV curve.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        grid: Grid,
        /// Comma-separated grid values (default: 0.001,0.01,0.1 or 0.1..1.0).
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Write a synthetic interaction stream as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        events: usize,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 50)]
        items: usize,
        #[arg(long, default_value_t = 8)]
        edge_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest(c) => commands::run_ingest(&c.resolve()?),
        Command::Train(c) => commands::run_train(&c.resolve()?, false),
        Command::TrainParallel(c) => commands::run_train(&c.resolve()?, true),
        Command::Eval { common, checkpoint, task } => commands::run_eval(&common.resolve()?, &checkpoint, task),
        Command::RestartEval { common, checkpoint } => commands::run_restart_eval(&common.resolve()?, checkpoint.as_deref()),
        Command::Sweep { common, grid, values } => {
            let values = if values.is_empty() { grid.default_values() } else { values };
            commands::run_sweep(&common.resolve()?, grid, &values)
        }
        Command::Synth { out, events, users, items, edge_dim, seed } => {
            let synth = SynthConfig { events, users, items, edge_dim, seed, ..SynthConfig::default() };
            commands::run_synth(&synth, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or_default().trim_start_matches("error: ");
            let err = CliError::User(first.to_string());
            eprintln!("{}", err.record());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
