//! Command-line frontend. Data goes to files (or stdout when no output path
//! is given); progress and warnings go to stderr.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cases;
use crate::estimator::{
    estimate_substation, estimate_window, write_json, EstimatorConfig, EstimatorError, EstimatorMode,
};
use crate::indices::BOUNDARY_BAND;
use crate::measurement::{
    add_noise, group_by_substation, ramp_points, read_frames, sample_points_from, write_frames_to,
    MeasurementError, MeasurementWindow,
};
use crate::monitor::{monitor_frames, sweep, MonitorError, SweepOptions};
use crate::network::{load_network, NetworkError, NetworkModel};
use crate::powerflow::{run_whatif, Intervention, NoseOptions, PowerFlowError, SolverOptions, Strategy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_ESTIMATION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "tdstab", version, about = "Voltage stability monitoring for coupled transmission and distribution systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a loading trajectory and write PMU/μPMU frames as CSV.
    Simulate(SimulateArgs),
    /// Estimate Thevenin equivalents from a measurement CSV.
    Estimate(EstimateArgs),
    /// Sliding-window estimation and stability reports over a measurement CSV.
    Monitor(MonitorArgs),
    /// Index curves from base loading up to the nose.
    Sweep(SweepArgs),
    /// Change in λ_max for a list of interventions.
    Whatif(WhatifArgs),
    /// Write one of the built-in networks as JSON.
    Case(CaseArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Monolithic,
    Cosim,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// How transmission and feeders are solved together.
    #[arg(long, value_enum, default_value = "monolithic")]
    pub strategy: StrategyArg,
}

impl SolverArgs {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            strategy: match self.strategy {
                StrategyArg::Monolithic => Strategy::Monolithic,
                StrategyArg::Cosim => Strategy::Cosim,
            },
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Exact,
    Soft,
}

#[derive(Debug, Args)]
pub struct EstimatorArgs {
    #[arg(long, value_enum, default_value = "exact")]
    pub mode: ModeArg,
    /// Asymmetry budget of the transmission-side matrix (soft mode).
    #[arg(long, default_value_t = 0.02)]
    pub xi_t: f64,
    /// Asymmetry budget of the distribution-side matrix (soft mode).
    #[arg(long, default_value_t = 0.02)]
    pub xi_d: f64,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    #[arg(long, default_value_t = 1e8)]
    pub cond_max: f64,
}

impl EstimatorArgs {
    fn config(&self) -> EstimatorConfig {
        EstimatorConfig {
            mode: match self.mode {
                ModeArg::Exact => EstimatorMode::ExactSymmetric,
                ModeArg::Soft => EstimatorMode::SoftConstrained,
            },
            xi_t: self.xi_t,
            xi_d: self.xi_d,
            ridge: self.ridge,
            cond_max: self.cond_max,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub network: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_start: f64,
    #[arg(long)]
    pub lambda_stop: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lambda_step: f64,
    /// μPMU nodes, comma separated; every loaded node when omitted.
    #[arg(long, value_delimiter = ',')]
    pub placement: Vec<String>,
    /// Relative random per-phase load variation of each frame.
    #[arg(long, default_value_t = 0.01)]
    pub excitation: f64,
    /// Relative standard deviation of measurement noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub measurements: PathBuf,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use only the last N frames of each substation (all when omitted).
    #[arg(long)]
    pub window: Option<usize>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    #[arg(long)]
    pub measurements: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
    #[arg(long, default_value_t = BOUNDARY_BAND)]
    pub band: f64,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_start: f64,
    /// Initial continuation step.
    #[arg(long, default_value_t = 0.05)]
    pub lambda_step: f64,
    /// Stop the curve here even if the nose is further out.
    #[arg(long)]
    pub lambda_stop: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub placement: Vec<String>,
    /// Frames per estimation window.
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    /// Relative depth of the load excitation inside each window.
    #[arg(long, default_value_t = 1e-3)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = BOUNDARY_BAND)]
    pub band: f64,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct WhatifArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `var:BUS:MVAR`, `line:FROM:TO:R,X[:RM,XM]` or `line:FROM:TO:dup`.
    #[arg(long = "intervention")]
    pub interventions: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_start: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lambda_step: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CaseName {
    ChainCase1,
    ChainCase2,
    ChainCase3,
    UnbalancedChain1,
    UnbalancedChain2,
    TwoSubstation,
    TwoSubstationWeakA,
}

impl CaseName {
    pub fn build(self) -> NetworkModel {
        match self {
            CaseName::ChainCase1 => cases::chain_case(1),
            CaseName::ChainCase2 => cases::chain_case(2),
            CaseName::ChainCase3 => cases::chain_case(3),
            CaseName::UnbalancedChain1 => cases::unbalanced_chain(1),
            CaseName::UnbalancedChain2 => cases::unbalanced_chain(2),
            CaseName::TwoSubstation => cases::two_substation(1.0, 1.0),
            CaseName::TwoSubstationWeakA => cases::two_substation(2.8, 1.0),
        }
    }
}

#[derive(Debug, Args)]
pub struct CaseArgs {
    #[arg(value_enum)]
    pub name: CaseName,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<PowerFlowError> for CliError {
    fn from(e: PowerFlowError) -> Self {
        let code = match e {
            PowerFlowError::UnknownBus(_) | PowerFlowError::Network(_) => EXIT_INPUT,
            _ => EXIT_SOLVER,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<MeasurementError> for CliError {
    fn from(e: MeasurementError) -> Self {
        let code = match e {
            MeasurementError::PowerFlow { .. } => EXIT_SOLVER,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        let code = match e {
            EstimatorError::BadConfig(_) => EXIT_INPUT,
            _ => EXIT_ESTIMATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<MonitorError> for CliError {
    fn from(e: MonitorError) -> Self {
        match e {
            MonitorError::Measurement(e) => e.into(),
            MonitorError::Estimator(e) => e.into(),
            MonitorError::PowerFlow(e) => e.into(),
            MonitorError::Index(e) => Self {
                code: EXIT_ESTIMATION,
                message: e.to_string(),
            },
            MonitorError::NoFrames => Self::input(e.to_string()),
        }
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Monitor(a) => cmd_monitor(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Whatif(a) => cmd_whatif(&a),
        Command::Case(a) => cmd_case(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::input(format!("{}: no such file", path.display())))
    }
}

fn positive(name: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(CliError::input(format!("{name} must be positive, got {x}")))
    }
}

fn non_negative(name: &str, x: f64) -> Result<(), CliError> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(CliError::input(format!("{name} must be non-negative, got {x}")))
    }
}

/// λ values from `start` to `stop` inclusive.
pub fn lambda_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor();
    if n < 0.0 {
        return Vec::new();
    }
    (0..=n as usize).map(|k| start + k as f64 * step).collect()
}

fn placement_or_all(model: &NetworkModel, placement: &[String]) -> Vec<String> {
    if placement.is_empty() {
        model.load_nodes()
    } else {
        placement.to_vec()
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    require_file(&a.network)?;
    positive("--lambda-step", a.lambda_step)?;
    positive("--lambda-start", a.lambda_start)?;
    non_negative("--excitation", a.excitation)?;
    non_negative("--noise-sigma", a.noise_sigma)?;
    if a.excitation >= 1.0 {
        return Err(CliError::input("--excitation must be below 1"));
    }
    let model = load_network(&a.network)?;
    let placement = placement_or_all(&model, &a.placement);
    let points = ramp_points(&lambda_grid(a.lambda_start, a.lambda_stop, a.lambda_step), a.excitation, a.seed);
    if points.is_empty() {
        return Err(CliError::input("--lambda-stop is below --lambda-start"));
    }
    let (frames, failure) = match sample_points_from(&model, &points, &placement, &a.solver.options(), None) {
        Ok(f) => (f, None),
        Err(p) => (p.frames, Some(p.error)),
    };
    if let Some(e) = &failure {
        if !matches!(e, MeasurementError::PowerFlow { .. }) {
            return Err(failure.unwrap().into());
        }
    }
    let frames = if a.noise_sigma > 0.0 {
        add_noise(&frames, a.noise_sigma, a.seed)?
    } else {
        frames
    };
    let mut out = output(a.out.as_deref())?;
    write_frames_to(&frames, &mut out)?;
    out.flush()?;
    let n = frames.iter().map(|f| f.k).collect::<std::collections::BTreeSet<_>>().len();
    eprintln!("{n} of {} loading points written", points.len());
    match failure {
        Some(e) => {
            eprintln!("warning: trajectory stopped early");
            Err(e.into())
        }
        None => Ok(()),
    }
}

pub fn cmd_estimate(a: &EstimateArgs) -> Result<(), CliError> {
    require_file(&a.measurements)?;
    let frames = read_frames(&a.measurements)?;
    let config = a.estimator.config();
    let mut equivalents = Vec::new();
    let mut substations = Vec::new();
    for (sub, group) in group_by_substation(&frames) {
        let start = a.window.map_or(0, |m| group.len().saturating_sub(m));
        let w = MeasurementWindow::new(group[start..].to_vec())?;
        let eqs = estimate_window(&w, &config)?;
        for e in &eqs {
            eprintln!(
                "{sub}/{}: condition {:.2e}, residuals {:.2e} / {:.2e}{}",
                e.node,
                e.condition,
                e.residual_t,
                e.residual_d,
                if e.absent_phases.is_empty() {
                    String::new()
                } else {
                    format!(", absent phases {:?}", e.absent_phases)
                }
            );
        }
        equivalents.extend(eqs);
        match estimate_substation(&w, &config) {
            Ok(s) => substations.push(s),
            Err(EstimatorError::MissingSubstationCurrent(_)) => {
                eprintln!("{sub}: substation current not metered, no VSI_T")
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut out = output(a.out.as_deref())?;
    write_json(&mut out, &equivalents, &substations)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn cmd_monitor(a: &MonitorArgs) -> Result<(), CliError> {
    require_file(&a.measurements)?;
    non_negative("--band", a.band)?;
    let frames = read_frames(&a.measurements)?;
    let reports = monitor_frames(&frames, a.window, a.stride, &a.estimator.config(), a.band)?;
    let mut out = output(a.out.as_deref())?;
    match a.format {
        FormatArg::Json => {
            let doc: Vec<serde_json::Value> = reports
                .iter()
                .map(|(k, r)| serde_json::json!({ "k": k, "report": r.report }))
                .collect();
            serde_json::to_writer_pretty(&mut out, &doc)?;
            writeln!(out)?;
        }
        FormatArg::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["k", "node", "substation", "vsi_3ph", "tddi", "class", "critical"])?;
            for (k, r) in &reports {
                for n in &r.report.nodes {
                    w.write_record([
                        k.to_string(),
                        n.node.clone(),
                        n.substation.clone(),
                        format!("{:.15e}", n.vsi_3ph),
                        format!("{:.15e}", n.tddi),
                        n.class.as_str().to_string(),
                        (n.node == r.report.critical_node).to_string(),
                    ])?;
                }
            }
            w.flush()?;
        }
    }
    out.flush()?;
    if let Some((k, r)) = reports.last() {
        let c = r.report.critical();
        eprintln!(
            "frame {k}: critical node {} (vsi_3ph {:.4}, tddi {:.3}, {})",
            c.node,
            c.vsi_3ph,
            c.tddi,
            r.report.limiting.as_str()
        );
    }
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    require_file(&a.network)?;
    positive("--lambda-step", a.lambda_step)?;
    positive("--lambda-start", a.lambda_start)?;
    non_negative("--noise-sigma", a.noise_sigma)?;
    positive("--amplitude", a.amplitude)?;
    let model = load_network(&a.network)?;
    let mut nose = NoseOptions {
        start: a.lambda_start,
        initial_step: a.lambda_step,
        solver: a.solver.options(),
        ..Default::default()
    };
    if let Some(stop) = a.lambda_stop {
        nose.max_lambda = stop;
    }
    let opts = SweepOptions {
        nose,
        placement: a.placement.clone(),
        window: a.window,
        amplitude: a.amplitude,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
        estimator: a.estimator.config(),
        band: a.band,
    };
    let result = sweep(&model, &opts)?;
    let mut out = output(a.out.as_deref())?;
    result.write_csv(&mut out)?;
    out.flush()?;
    eprintln!("λ_max = {:.6}, {} rows", result.lambda_max, result.rows.len());
    if let Some(last) = result.last() {
        let r = &last.assessment.report;
        let c = r.critical();
        eprintln!(
            "at λ = {:.6}: critical node {} (vsi_3ph {:.4}, tddi {:.3}, {})",
            last.lambda,
            c.node,
            c.vsi_3ph,
            c.tddi,
            r.limiting.as_str()
        );
    }
    match result.error {
        Some(e) => {
            eprintln!("warning: curve stopped early");
            Err(CliError {
                code: EXIT_SOLVER,
                message: e,
            })
        }
        None => Ok(()),
    }
}

pub fn cmd_whatif(a: &WhatifArgs) -> Result<(), CliError> {
    require_file(&a.network)?;
    positive("--lambda-step", a.lambda_step)?;
    let model = load_network(&a.network)?;
    let interventions = a
        .interventions
        .iter()
        .map(|s| s.parse::<Intervention>().map_err(|e| CliError::input(format!("{s}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let opts = NoseOptions {
        start: a.lambda_start,
        initial_step: a.lambda_step,
        solver: a.solver.options(),
        ..Default::default()
    };
    let table = run_whatif(&model, &interventions, &opts)?;
    let mut out = output(a.out.as_deref())?;
    table.write_csv(&mut out)?;
    out.flush()?;
    eprintln!("base λ_max = {:.6}", table.base_lambda_max);
    for r in &table.rows {
        eprintln!("{:<24} λ_max = {:.6}  Δ = {:+.3}%", r.label, r.lambda_max, r.delta_pct);
    }
    Ok(())
}

pub fn cmd_case(a: &CaseArgs) -> Result<(), CliError> {
    let model = a.name.build();
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "{}", model.to_json_string())?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_includes_both_ends() {
        let g = lambda_grid(1.0, 1.2, 0.05);
        assert_eq!(g.len(), 5);
        assert!((g[4] - 1.2).abs() < 1e-12);
        assert!(lambda_grid(2.0, 1.0, 0.1).is_empty());
    }

    #[test]
    fn arguments_parse() {
        let cli = Cli::try_parse_from([
            "tdstab", "simulate", "--network", "n.json", "--lambda-stop", "2", "--placement", "a,b",
        ])
        .unwrap();
        match cli.command {
            Command::Simulate(a) => {
                assert_eq!(a.placement, vec!["a", "b"]);
                assert_eq!(a.lambda_step, 0.05);
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["tdstab", "estimate"]).is_err());
    }

    #[test]
    fn solver_errors_map_to_exit_codes() {
        let e: CliError = PowerFlowError::UnknownBus("X".into()).into();
        assert_eq!(e.code, EXIT_INPUT);
        let e: CliError = PowerFlowError::BaseCaseDiverged { lambda: 1.0, reason: String::new() }.into();
        assert_eq!(e.code, EXIT_SOLVER);
        let e: CliError = EstimatorError::WindowTooSmall { frames: 1, required: 4 }.into();
        assert_eq!(e.code, EXIT_ESTIMATION);
    }
}
