//! Command-line front end: `simulate`, `meanfield`, `sweep` and `check`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, IntegratorConfig, Terminal};
use crate::error::{Error, Result};
use crate::experiments::{self, BoundaryAxis, NetworkSource, SweepSpec, DEFAULT_RELAX_TOL};
use crate::market::{apply_shock, MarketNetwork, ModelParams, ShockSpec};
use crate::meanfield;

#[derive(Debug, Parser)]
#[command(name = "gipsi", version, about = "Shock propagation on bipartite investor/asset markets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Shock a network and integrate it.
    Simulate(RunArgs),
    /// Closed-form mean-field report.
    Meanfield(MeanfieldArgs),
    /// Sweep a grid of (alpha, beta).
    Sweep(SweepArgs),
    /// Compare a run against one with half the step.
    Check(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write holdings, velocities and returns.
    #[arg(long)]
    pub full: bool,
}

#[derive(Debug, Args)]
pub struct MeanfieldArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau_a: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau_b: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub f0: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Scan direction for the boundary locus.
    #[arg(long, value_enum, default_value = "beta")]
    pub axis: AxisArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum AxisArg {
    Beta,
    Alpha,
}

impl From<AxisArg> for BoundaryAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Beta => BoundaryAxis::Beta,
            AxisArg::Alpha => BoundaryAxis::Alpha,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitFlags {
    #[serde(default = "yes")]
    pub trajectory: bool,
    #[serde(default = "yes")]
    pub events: bool,
    #[serde(default)]
    pub full: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        EmitFlags {
            trajectory: true,
            events: true,
            full: false,
        }
    }
}

fn default_tol() -> f64 {
    DEFAULT_RELAX_TOL
}

/// A single simulation, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: ModelParams,
    pub network: NetworkSource,
    pub shock: ShockSpec,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub emit: EmitFlags,
    #[serde(default = "default_tol")]
    pub relax_tol: f64,
}

/// Parse and validate; file references are resolved relative to the
/// config's directory and loaded here.
pub fn load_run_config(path: &Path) -> Result<(RunConfig, MarketNetwork)> {
    let mut config: RunConfig = read_json(path)?;
    config.params.validate()?;
    config.integrator.validate(&config.params)?;
    if !(config.relax_tol.is_finite() && config.relax_tol > 0.0) {
        return Err(Error::param("relax_tol", "must be > 0"));
    }
    resolve_source(&mut config.network, path);
    let network = config.network.build(0)?;
    config.shock.validate(network.n_investors)?;
    Ok((config, network))
}

pub fn load_sweep_spec(path: &Path) -> Result<SweepSpec> {
    let mut spec: SweepSpec = read_json(path)?;
    resolve_source(&mut spec.network, path);
    spec.validate()?;
    Ok(spec)
}

fn resolve_source(source: &mut NetworkSource, config_path: &Path) {
    if let NetworkSource::File(p) = source {
        if p.is_relative() {
            if let Some(dir) = config_path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| std::io::Write::flush(&mut w))
        .map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::from)?;
        std::io::Write::write_all(w, b"\n")
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Serialize)]
struct Summary {
    terminal: Terminal,
    order_param: f64,
    relax_time: f64,
    censored: bool,
    n_events: usize,
}

/// Returns the process exit code.
pub fn cmd_simulate(args: &RunArgs) -> Result<i32> {
    let (config, network) = load_run_config(&args.config)?;
    let out = args
        .out
        .clone()
        .or(config.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&out)?;

    let initial = apply_shock(&network, &config.shock, &config.params)?;
    let traj = dynamics::integrate(&initial, &config.params, &config.integrator)?;
    info!("run ended: {:?} after {} samples", traj.terminal, traj.samples.len());

    if config.emit.trajectory {
        let full = args.full || config.emit.full;
        write_file(&out.join("trajectory.csv"), |w| dynamics::write_trajectory_csv(&traj, w, full))?;
    }
    if config.emit.events {
        write_json(&out.join("events.json"), &dynamics::events_json(&traj.events))?;
    }
    let relax = experiments::relaxation_time(&traj, config.relax_tol)?;
    let summary = Summary {
        terminal: traj.terminal,
        order_param: experiments::order_parameter(&traj),
        relax_time: relax.time(),
        censored: relax.is_censored(),
        n_events: traj.events.len(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(match traj.terminal {
        Terminal::Diverged => 2,
        Terminal::ReachedHorizon | Terminal::AllDead => 0,
    })
}

pub fn cmd_meanfield(args: &MeanfieldArgs) -> Result<i32> {
    let params = ModelParams::new(args.alpha, args.beta, args.tau_a, args.tau_b)?;
    let report = meanfield::report(&params, args.f0)?;
    let text = serde_json::to_string_pretty(&report).map_err(|source| Error::Json {
        context: "meanfield report".into(),
        source,
    })?;
    println!("{text}");
    Ok(0)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let spec = load_sweep_spec(&args.config)?;
    ensure_dir(&args.out)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(Error::param("--jobs", "must be >= 1"));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::param("--jobs", e.to_string()))?;
    let map = pool.install(|| experiments::run_sweep(&spec))?;
    let locus = experiments::extract_boundary(&map, args.axis.into());
    write_file(&args.out.join("phase_map.csv"), |w| map.write_csv(w))?;
    write_file(&args.out.join("boundary.csv"), |w| experiments::write_boundary_csv(&locus, w))?;
    info!("{} cells, {} boundary points", map.cells.len(), locus.len());
    let failed = map.n_failed();
    if failed > 0 {
        warn!("{failed} cells failed");
        return Ok(1);
    }
    Ok(0)
}

pub fn cmd_check(args: &RunArgs) -> Result<i32> {
    let (config, network) = load_run_config(&args.config)?;
    let initial = apply_shock(&network, &config.shock, &config.params)?;
    let report = dynamics::halve_step_check(&initial, &config.params, &config.integrator)?;
    let text = serde_json::to_string_pretty(&report).map_err(|source| Error::Json {
        context: "convergence report".into(),
        source,
    })?;
    println!("{text}");
    Ok(0)
}

pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Meanfield(a) => cmd_meanfield(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
