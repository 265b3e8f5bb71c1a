//! `hyperflock`: run consensus flows, basin estimates, geometric checks,
//! equilibrium classification and the ellipsoid/sphere equivalence test
//! from a JSON configuration.
//!
//! Exit codes: 0 pass, 1 condition violated, 2 configuration error,
//! 3 numerical failure, 4 supplied state is not an equilibrium.

mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyperflock::analysis::{
    check_assumption1, check_convexity, classify_equilibrium, strong_convexity_alpha, StabilityReport,
};
use hyperflock::experiment::{basin, equivalence, trial_rng};
use hyperflock::flow::{integrate, random_configuration, FieldKind, FlowParams, StopReason};
use hyperflock::graph::Edge;
use hyperflock::manifold::{BuiltinSurface, ImplicitSurface};
use hyperflock::Error;
use serde::Serialize;

use config::{Loaded, Which};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(Error),
    #[error("not an equilibrium: field norm {residual:.3e} exceeds {tol:.1e}")]
    NotEquilibrium { residual: f64, tol: f64 },
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl CliError {
    fn config(e: Error) -> Self {
        CliError::Config(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Output { .. } => 3,
            CliError::NotEquilibrium { .. } => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NotEquilibrium { residual, tol } => CliError::NotEquilibrium { residual, tol },
            Error::InvalidParameter(_)
            | Error::IndexOutOfRange { .. }
            | Error::DimensionMismatch { .. }
            | Error::NotSpd
            | Error::NotOnSurface { .. }
            | Error::DisconnectedGraph => CliError::config(e),
            _ => CliError::Numerical(e),
        }
    }
}

#[derive(Parser)]
#[command(name = "hyperflock", version, about = "Consensus flows on implicit hypersurfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`; default: current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `experiment.seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one flow; writes trajectory.csv and summary.json.
    Simulate(Common),
    /// Monte-Carlo consensus basin estimate; writes basin.json.
    Basin(Common),
    /// Sample a geometric condition; writes check_<which>.json. Exit 1 if violated.
    Check {
        #[command(flatten)]
        common: Common,
        /// Condition to check (overrides `experiment.which`).
        #[arg(long, value_enum)]
        which: Option<Which>,
    },
    /// Second-order classification of an equilibrium; writes classify.json.
    Classify {
        #[command(flatten)]
        common: Common,
        /// State file `{"points": [[...], ...]}` (overrides `experiment.state`).
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Compare ellipsoid and pulled-back sphere trajectories; writes equivalence.json.
    Equivalence(Common),
}

struct Run {
    loaded: Loaded,
    out: PathBuf,
    seed: u64,
}

impl Run {
    fn new(common: &Common) -> Result<Self, CliError> {
        let loaded = Loaded::from_path(&common.config)?;
        let out = match (&common.out, &loaded.config.output.dir) {
            (Some(dir), _) => dir.clone(),
            (None, Some(dir)) => loaded.resolve(dir),
            (None, None) => PathBuf::from("."),
        };
        let seed = common.seed.unwrap_or(loaded.config.experiment.seed);
        Ok(Self { loaded, out, seed })
    }

    fn flow(&self) -> &FlowParams {
        &self.loaded.config.flow
    }

    fn field(&self) -> FieldKind {
        self.loaded.config.experiment.field
    }

    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::Output {
            path: self.out.clone(),
            message: e.to_string(),
        })?;
        Ok(self.out.join(name))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let path = self.path(name)?;
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        fs::write(&path, text).map_err(|e| output_error(&path, e))?;
        Ok(path)
    }
}

fn output_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Serialize)]
struct Summary {
    surface: String,
    n_agents: usize,
    field: FieldKind,
    seed: u64,
    params: FlowParams,
    steps: usize,
    final_time: f64,
    initial_disagreement: f64,
    final_disagreement: f64,
    converged: bool,
    stop_reason: StopReason,
    max_constraint_drift: f64,
    max_surface_residual: f64,
    max_disagreement_increase: f64,
    final_field_norm: f64,
}

fn simulate(run: &Run) -> Result<u8, CliError> {
    let surface = run.loaded.surface()?;
    let graph = run.loaded.graph()?;
    let x0 = match run.loaded.fixed_init(&surface)? {
        Some(x) => x,
        None => random_configuration(&surface, graph.n_agents(), &mut trial_rng(run.seed, 0))?,
    };
    let traj = integrate(&surface, &graph, &x0, run.flow(), run.field())?;

    let csv = run.path("trajectory.csv")?;
    let file = File::create(&csv).map_err(|e| output_error(&csv, e))?;
    traj.write_csv(BufWriter::new(file)).map_err(|e| output_error(&csv, e))?;
    let summary = Summary {
        surface: surface.name(),
        n_agents: graph.n_agents(),
        field: run.field(),
        seed: run.seed,
        params: *run.flow(),
        steps: traj.steps,
        final_time: traj.final_time(),
        initial_disagreement: traj.disagreement[0],
        final_disagreement: traj.final_disagreement(),
        converged: traj.converged,
        stop_reason: traj.stop_reason,
        max_constraint_drift: traj.max_constraint_drift,
        max_surface_residual: traj.max_surface_residual,
        max_disagreement_increase: traj.max_disagreement_increase,
        final_field_norm: traj.final_field_norm,
    };
    run.write_json("summary.json", &summary)?;
    println!(
        "simulate: converged={} final V={:.3e} t={} ({:?})",
        summary.converged, summary.final_disagreement, summary.final_time, summary.stop_reason
    );
    Ok(0)
}

fn run_basin(run: &Run) -> Result<u8, CliError> {
    let surface = run.loaded.surface()?;
    let graph = run.loaded.graph()?;
    let trials = run.loaded.config.experiment.trials;
    let report = basin(&surface, &graph, run.flow(), run.field(), trials, run.seed)?;
    run.write_json("basin.json", &report)?;
    println!(
        "basin: {}/{} converged (fraction {}), {} failed",
        report.n_converged,
        report.n_trials,
        report.fraction,
        report.failures.len()
    );
    Ok(0)
}

fn check(run: &Run, which: Option<Which>) -> Result<u8, CliError> {
    let which = which
        .or(run.loaded.config.experiment.which)
        .ok_or_else(|| CliError::Config("no condition given: pass --which or set experiment.which".into()))?;
    let surface = run.loaded.surface()?;
    let exp = &run.loaded.config.experiment;
    let mut rng = trial_rng(run.seed, 0);
    let name = format!("check_{}.json", which.name());
    let passes = match which {
        Which::Assumption1 | Which::Convexity => {
            let report = if which == Which::Assumption1 {
                check_assumption1(&surface, exp.n_pairs, &mut rng)?
            } else {
                check_convexity(&surface, exp.n_pairs, &mut rng)?
            };
            run.write_json(&name, &report)?;
            println!(
                "check {}: {} (min margin {:.3e} over {} pairs)",
                which.name(),
                if report.violated { "violated" } else { "passes" },
                report.min_margin,
                report.n_pairs
            );
            !report.violated
        }
        Which::Alpha => {
            let report = strong_convexity_alpha(&surface, exp.n_samples, &mut rng)?;
            run.write_json(&name, &report)?;
            println!(
                "check alpha: alpha={:.6} {}",
                report.alpha,
                if report.passes { "passes" } else { "violated" }
            );
            report.passes
        }
    };
    Ok(if passes { 0 } else { 1 })
}

#[derive(Serialize)]
struct ClassifyReport<'a> {
    surface: String,
    n_agents: usize,
    edges: Vec<Edge>,
    equilibrium: Vec<Vec<f64>>,
    #[serde(flatten)]
    report: &'a StabilityReport,
}

fn classify(run: &Run, state: Option<PathBuf>) -> Result<u8, CliError> {
    let surface = run.loaded.surface()?;
    let graph = run.loaded.graph()?;
    let state = state
        .or_else(|| run.loaded.config.experiment.state.as_ref().map(|p| run.loaded.resolve(p)))
        .ok_or_else(|| CliError::Config("no state file: pass --state or set experiment.state".into()))?;
    let x = run.loaded.read_state(&state, &surface)?;
    let report = classify_equilibrium(&surface, &graph, &x)?;
    let document = ClassifyReport {
        surface: surface.name(),
        n_agents: graph.n_agents(),
        edges: graph.edges().to_vec(),
        equilibrium: x.points().iter().map(|p| p.iter().copied().collect()).collect(),
        report: &report,
    };
    run.write_json("classify.json", &document)?;
    println!(
        "classify: {:?}, min eigenvalue {:.6e}, trace_M {:.6e}",
        report.classification, report.min_eigenvalue, report.trace_m
    );
    Ok(0)
}

fn run_equivalence(run: &Run) -> Result<u8, CliError> {
    let surface = run.loaded.surface()?;
    let BuiltinSurface::Ellipsoid(ellipsoid) = &surface else {
        return Err(CliError::Config("equivalence needs an ellipsoid surface".into()));
    };
    let graph = run.loaded.graph()?;
    let y0 = random_configuration(&surface, graph.n_agents(), &mut trial_rng(run.seed, 0))?;
    let report = equivalence(
        ellipsoid.matrix(),
        ellipsoid.normalization(),
        &graph,
        &y0,
        run.flow(),
    )?;
    run.write_json("equivalence.json", &report)?;
    println!(
        "equivalence: max deviation {:.3e} ({})",
        report.max_deviation,
        if report.passes { "passes" } else { "exceeds tolerance" }
    );
    Ok(if report.passes { 0 } else { 1 })
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Simulate(common) => simulate(&Run::new(&common)?),
        Command::Basin(common) => run_basin(&Run::new(&common)?),
        Command::Check { common, which } => check(&Run::new(&common)?, which),
        Command::Classify { common, state } => classify(&Run::new(&common)?, state),
        Command::Equivalence(common) => run_equivalence(&Run::new(&common)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("hyperflock: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
