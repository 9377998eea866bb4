//! `mtn`: runs scenario files through the simulator and writes the trace,
//! metrics and topology dump.

pub mod format;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mtn_core::simcore::{self, RunOutput, SimError};
use thiserror::Error;

pub use format::{describe, parse_scenario, parse_str, Position, ScenarioError};

#[derive(Debug, Parser)]
#[command(name = "mtn", version, about = "Deterministic transient-network scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        /// Output directory, created if missing.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write topology.txt.
        #[arg(long)]
        dump_topology: bool,
        #[arg(long)]
        no_trace: bool,
        #[arg(long)]
        no_metrics: bool,
        /// Replace the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliConfig {
    pub scenario_path: PathBuf,
    pub output_dir: PathBuf,
    pub dump_topology: bool,
    pub trace: bool,
    pub metrics: bool,
    pub seed_override: Option<u64>,
}

impl CliConfig {
    pub fn new(scenario_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario_path: scenario_path.into(),
            output_dir: output_dir.into(),
            dump_topology: false,
            trace: true,
            metrics: true,
            seed_override: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {message}")]
    Rejected { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Invariant { path: PathBuf, message: String },
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl RunError {
    /// 2 for broken simulator invariants, 1 for everything the user can
    /// fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invariant { .. } => 2,
            _ => 1,
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(|source| RunError::Output {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses, runs and writes the requested outputs.
pub fn execute(cfg: &CliConfig) -> Result<RunOutput, RunError> {
    let mut scenario = parse_scenario(&cfg.scenario_path)?;
    if let Some(seed) = cfg.seed_override {
        scenario.seed = seed;
    }
    let path = cfg.scenario_path.clone();
    let out = simcore::run::<f64>(scenario, cfg.trace).map_err(|e| match e {
        SimError::InvalidScenario(e) => RunError::Rejected {
            path: path.clone(),
            message: format!("invalid `{}`: {}", e.location, e.message),
        },
        SimError::Invariant(message) => RunError::Invariant { path, message },
    })?;
    fs::create_dir_all(&cfg.output_dir).map_err(|source| RunError::Output {
        path: cfg.output_dir.clone(),
        source,
    })?;
    if cfg.trace {
        write(&cfg.output_dir.join("trace.log"), &out.trace.render())?;
    }
    if cfg.metrics {
        write(&cfg.output_dir.join("metrics.csv"), &out.metrics.to_csv())?;
    }
    if cfg.dump_topology {
        write(&cfg.output_dir.join("topology.txt"), &out.topology)?;
    }
    Ok(out)
}

/// Entry point shared by the binary and tests; returns the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let Command::Run {
        scenario,
        out,
        dump_topology,
        no_trace,
        no_metrics,
        seed,
    } = cli.command;
    let cfg = CliConfig {
        scenario_path: scenario,
        output_dir: out,
        dump_topology,
        trace: !no_trace,
        metrics: !no_metrics,
        seed_override: seed,
    };
    match execute(&cfg) {
        Ok(run) => {
            let m = run.metrics;
            println!(
                "delivered={} dropped={} mean_hops={:.3} stores={} flushes={} evictions={} -> {}",
                m.delivered,
                m.dropped(),
                m.mean_hops,
                m.stores,
                m.flushes,
                m.evictions,
                cfg.output_dir.display()
            );
            0
        }
        Err(e) => {
            eprintln!("mtn: {e}");
            e.exit_code()
        }
    }
}
