//! `ripa-sim`: batch front-end for the RIPA simulation toolkit.
//!
//! Every run resolves a configuration, executes one subcommand into an
//! output directory and records a `manifest.json` from which the run can be
//! replayed byte for byte.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use ripa_core::SystemConfig;
use serde::{Deserialize, Serialize};

pub mod commands;
pub mod manifest;
pub mod overrides;
pub mod presets;

pub use commands::*;
pub use manifest::{Artifacts, RunManifest};

pub const TOOL: &str = "ripa-sim";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] ripa_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("replay differs in {} artifact(s): {}", .0.len(), .0.join(", "))]
    ReplayMismatch(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Core(e) if e.is_validation() => EXIT_VALIDATION,
            _ => EXIT_NUMERICAL,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = TOOL, version, about = "Re-imaging phased array simulations")]
pub struct Cli {
    /// JSON configuration; the built-in device when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "ripa-out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Dotted-path override, e.g. `geometry.n_cols=11`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Free spectral ranges, zone size and waists.
    Derive,
    /// Focal image of one tone and its Gaussian fit.
    Focal(FocalArgs),
    /// Addressed and measured spot position against detuning.
    Sweep(SweepArgs),
    /// Multi-tone grid image, spot fits and uniformity.
    Grid(GridArgs),
    /// Crosstalk against separation with a power-law tail fit.
    Crosstalk(CrosstalkArgs),
    /// Photodetector trace of a single pulse and its edges.
    Pulse(PulseArgs),
    /// Scanning-detector movie of a drive program and the spot tracks.
    Move(MoveArgs),
    /// Efficiency against broadening for a uniform-loss array.
    Tradeoff(TradeoffArgs),
    /// Efficiency budget of the configured losses.
    Budget,
    /// Simulated fringe calibration of injected aberrations.
    Calibrate(CalibrateArgs),
    /// Lens-guide stability of both stages.
    Stability(StabilityArgs),
    /// Rerun a manifest into `--out` and compare artifact hashes.
    #[serde(skip)]
    Replay { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Derive => "derive",
            Command::Focal(_) => "focal",
            Command::Sweep(_) => "sweep",
            Command::Grid(_) => "grid",
            Command::Crosstalk(_) => "crosstalk",
            Command::Pulse(_) => "pulse",
            Command::Move(_) => "move",
            Command::Tradeoff(_) => "tradeoff",
            Command::Budget => "budget",
            Command::Calibrate(_) => "calibrate",
            Command::Stability(_) => "stability",
            Command::Replay { .. } => "replay",
        }
    }
}

/// Parses arguments, runs and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    init_threads();
    match execute(&cli) {
        Ok(manifest) => {
            info!(
                "{} artifacts written to {}",
                manifest.artifacts.len(),
                manifest.output_directory.display()
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{TOOL}: {e}");
            e.exit_code()
        }
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("RIPA_SIM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Overlays the configuration file (possibly partial) and the overrides on
/// the built-in device, then validates.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<SystemConfig, CliError> {
    let mut doc = serde_json::to_value(SystemConfig::default()).map_err(|e| CliError::Numerical(e.to_string()))?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
        let patch = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
        overrides::merge(&mut doc, patch);
    }
    overrides::apply_overrides(&mut doc, overrides)?;
    let cfg: SystemConfig =
        serde_json::from_value(doc).map_err(|e| CliError::Validation(format!("configuration: {e}")))?;
    Ok(cfg.validated()?)
}

pub fn execute(cli: &Cli) -> Result<RunManifest, CliError> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, &cli.out);
    }
    let config = resolve_config(cli.config.as_deref(), &cli.set)?;
    let command = commands::prepare(cli.command.clone())?;
    let template = RunManifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        subcommand: command.name().into(),
        config_hash: manifest::json_hash(&config)?,
        command,
        config_path: cli.config.clone(),
        overrides: cli.set.clone(),
        config,
        seed: cli.seed,
        output_directory: cli.out.clone(),
        artifacts: Default::default(),
    };
    produce(template)
}

/// Runs the command recorded in `m` into `m.output_directory` and writes the
/// completed manifest.
pub fn produce(mut m: RunManifest) -> Result<RunManifest, CliError> {
    let art = Artifacts::create(&m.output_directory)?;
    commands::run_command(&m.command, &m.config, m.seed, &art)?;
    m.artifacts = art.digest()?;
    art.write_manifest(&m)?;
    Ok(m)
}

pub fn replay(path: &Path, out: &Path) -> Result<RunManifest, CliError> {
    let recorded = RunManifest::load(path)?;
    if recorded.tool != TOOL {
        return Err(CliError::Validation(format!("manifest written by {:?}", recorded.tool)));
    }
    let hash = manifest::json_hash(&recorded.config)?;
    if hash != recorded.config_hash {
        return Err(CliError::Validation("manifest config does not match its hash".into()));
    }
    let config = recorded.config.clone().validated()?;
    let rerun = produce(RunManifest {
        config,
        output_directory: out.to_path_buf(),
        artifacts: Default::default(),
        ..recorded.clone()
    })?;
    let keys: std::collections::BTreeSet<_> = recorded.artifacts.keys().chain(rerun.artifacts.keys()).collect();
    let diff: Vec<String> = keys
        .into_iter()
        .filter(|k| recorded.artifacts.get(*k) != rerun.artifacts.get(*k))
        .cloned()
        .collect();
    if diff.is_empty() {
        Ok(rerun)
    } else {
        Err(CliError::ReplayMismatch(diff))
    }
}
