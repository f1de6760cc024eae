//! `mbcbf`: headless entry point for simulation, data collection, training,
//! evaluation, replay, the live session server and the verification suites.
//!
//! Every run prints its resolved configuration as one JSON line before any
//! work, then a JSON result. Failures print `{"error": {...}}` and exit
//! nonzero.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mbcbf", version, about = "Backup-CBF safety filter with learned controller switching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run scripted-driver episodes and print a safety summary.
    Simulate(SimulateArgs),
    /// Collect a labeled dataset from the training curriculum.
    Collect(CollectArgs),
    /// Train a reward model on a dataset.
    Train(TrainArgs),
    /// Accuracy and confusion matrix of a model on a dataset.
    Eval(EvalArgs),
    /// Re-simulate a recorded episode log and compare tick by tick.
    Replay(ReplayArgs),
    /// Serve a live session over TCP.
    Serve(ServeArgs),
    /// Run every property suite and fail on any violation.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario JSON file; the built-in scenario when absent.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Built-in mission (`dock_and_pass`, `pass`); supplies scenario and driver.
    #[arg(long, conflicts_with = "scenario")]
    pub mission: Option<String>,
    /// `rammer`, `orbiter`, `goal_seeker`, `idle`, or a driver JSON file.
    #[arg(long)]
    pub driver: Option<String>,
    /// Reward model file; switching is learned when given.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Initial (and, without a model, only) backup controller.
    #[arg(long)]
    pub policy: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Episode length in seconds; 8 s or the mission length by default.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Keep the scenario start instead of drawing one per seed.
    #[arg(long)]
    pub fixed_start: bool,
    /// Directory for per-seed episode logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-seed CSV tables of trajectory and margins to `--out`.
    #[arg(long, requires = "out")]
    pub tables: bool,
    /// Include a summary line per episode.
    #[arg(long)]
    pub per_episode: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CollectArgs {
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Curriculum JSON file (array of items); the built-in curriculum when absent.
    #[arg(long)]
    pub curriculum: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset output file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Training configuration JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "out-model")]
    pub out_model: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Label shift in ticks, matching the one used for training.
    #[arg(long, default_value_t = 2)]
    pub label_shift: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Model to replay with; a different model than recorded gives a
    /// counterfactual run.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, conflicts_with = "scenario")]
    pub mission: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, env = "MBCBF_PORT", default_value_t = mbcbf_core::session::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// Stop after this many ticks; runs until killed when absent.
    #[arg(long)]
    pub max_ticks: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    pub hold_timeout: f64,
    /// Where to write the session episode log once the session ends.
    #[arg(long)]
    pub out_log: Option<PathBuf>,
    /// Where to write the labeled rows recorded during the session.
    #[arg(long)]
    pub out_dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    /// Reduced sample counts; thresholds unchanged.
    #[arg(long)]
    pub quick: bool,
    /// Use this model instead of training one.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Process exit codes beyond plain failure.
pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const DIVERGED: u8 = 3;
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use mbcbf_core::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::VersionMismatch { .. }) => "version_mismatch",
        Some(E::InvalidScenario(_)) => "invalid_scenario",
        Some(E::InvalidParameter(_)) => "invalid_parameter",
        Some(E::Model(_)) => "model",
        Some(E::Dataset(_)) => "dataset",
        Some(E::Session(_)) => "session",
        Some(E::Io(_)) => "io",
        Some(E::Json(_)) => "json",
        Some(_) => "numeric",
        None if e.downcast_ref::<commands::PathError>().is_some() => "path",
        None => "error",
    }
}

fn print_error(kind: &str, message: &str) {
    println!("{}", serde_json::json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            print_error("usage", e.to_string().trim());
            return ExitCode::from(exit::USAGE);
        }
    };
    let outcome = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Collect(a) => commands::collect(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Replay(a) => commands::replay(&a),
        Command::Serve(a) => commands::serve(&a),
        Command::Verify(a) => commands::verify(&a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            print_error(error_kind(&e), &format!("{e:#}"));
            ExitCode::from(exit::FAILURE)
        }
    }
}
