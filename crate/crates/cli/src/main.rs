//! Command-line harness: builds or loads a case, runs the study scenarios
//! under selected control modes, and writes trajectories, steady-state
//! tables, and summaries.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use appf_core::error::CaseError;
use appf_core::grid::Network;
use appf_core::powerflow::{solve_regular_power_flow, NrOptions};
use appf_core::scenario::{
    build_reference_case, compare_rpf_appf, load_case, run_case, ControlMode, ScenarioConfig,
    ScenarioId, REFERENCE_SLACK_BUS,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_SIMULATION: u8 = 3;

#[derive(Parser)]
#[command(
    name = "appf",
    about = "Hierarchical frequency and voltage control scenarios on a multi-area grid",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario under one or more control modes and write artifacts.
    Run(RunArgs),
    /// Compare conventional redispatch with the staged dispatch.
    Compare(CompareArgs),
    /// List the built-in scenarios and control modes.
    ListScenarios,
    /// Check a case file's invariants and baseline power flow.
    ValidateCase { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario id (see list-scenarios).
    #[arg(long)]
    scenario: String,
    /// Control mode, repeatable: none, droop, hierarchical,
    /// hierarchical+droop, agc-only.
    #[arg(long = "mode")]
    modes: Vec<String>,
    /// Case file; the built-in 33-bus system when omitted.
    #[arg(long)]
    case: Option<PathBuf>,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Simulation horizon override, seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Tie-flow deviation weight.
    #[arg(long, default_value_t = 1.0)]
    w1: f64,
    /// Setpoint deviation weight.
    #[arg(long, default_value_t = 1.0)]
    w2: f64,
    /// Onset-to-primary actuation delay, seconds.
    #[arg(long)]
    primary_delay: Option<f64>,
    /// Onset-to-first-stage actuation delay, seconds.
    #[arg(long)]
    estimation_delay: Option<f64>,
    /// Per-stage solve delay, seconds.
    #[arg(long)]
    stage_delay: Option<f64>,
    /// Inter-area message latency, seconds.
    #[arg(long)]
    latency: Option<f64>,
    /// Randomize the latency inside lo,hi (robustness runs).
    #[arg(long, value_parser = parse_window)]
    latency_window: Option<(f64, f64)>,
    /// Gaussian noise applied to the estimated reactive imbalance.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Seed for the randomized knobs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON config file; its fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected lo,hi".into());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| "bad lower bound")?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| "bad upper bound")?;
    if lo > hi || lo < 0.0 {
        return Err("window must satisfy 0 <= lo <= hi".into());
    }
    Ok((lo, hi))
}

/// Config-file fields; anything present overrides the corresponding flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    scenario: Option<String>,
    modes: Option<Vec<String>>,
    case: Option<PathBuf>,
    out: Option<PathBuf>,
    duration: Option<f64>,
    w1: Option<f64>,
    w2: Option<f64>,
    primary_delay: Option<f64>,
    estimation_delay: Option<f64>,
    stage_delay: Option<f64>,
    latency: Option<f64>,
    latency_window: Option<(f64, f64)>,
    noise_sigma: Option<f64>,
    seed: Option<u64>,
    /// Replaces the scenario's built-in disturbance list.
    event_overrides: Option<Vec<appf_core::coordinator::ScheduledContingency>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CaseError::Simulation(_) => ExitCode::from(EXIT_SIMULATION),
                _ => ExitCode::from(EXIT_CONFIG),
            }
        }
    }
}

fn load_network(case: &Option<PathBuf>) -> Result<Network, CaseError> {
    match case {
        Some(path) => load_case(path),
        None => Ok(build_reference_case()),
    }
}

fn parse_scenario(s: &str) -> Result<ScenarioId, CaseError> {
    ScenarioId::parse(s).ok_or_else(|| CaseError::UnknownScenario(s.to_string()))
}

fn parse_modes(modes: &[String]) -> Result<Vec<ControlMode>, CaseError> {
    if modes.is_empty() {
        return Ok(vec![ControlMode::Hierarchical]);
    }
    modes
        .iter()
        .map(|m| {
            ControlMode::parse(m)
                .ok_or_else(|| CaseError::BadConfig(format!("unknown control mode {m:?}")))
        })
        .collect()
}

fn dispatch(cli: Cli) -> Result<(), CaseError> {
    match cli.command {
        Command::Run(mut args) => {
            // Precedence: defaults < flags < config file.
            let mut file_events = None;
            if let Some(path) = &args.config {
                let text = std::fs::read_to_string(path)?;
                let file: FileConfig = serde_json::from_str(&text)?;
                if let Some(v) = file.scenario {
                    args.scenario = v;
                }
                if let Some(v) = file.modes {
                    args.modes = v;
                }
                if let Some(v) = file.case {
                    args.case = Some(v);
                }
                if let Some(v) = file.out {
                    args.out = v;
                }
                if let Some(v) = file.duration {
                    args.duration = Some(v);
                }
                if let Some(v) = file.w1 {
                    args.w1 = v;
                }
                if let Some(v) = file.w2 {
                    args.w2 = v;
                }
                if let Some(v) = file.primary_delay {
                    args.primary_delay = Some(v);
                }
                if let Some(v) = file.estimation_delay {
                    args.estimation_delay = Some(v);
                }
                if let Some(v) = file.stage_delay {
                    args.stage_delay = Some(v);
                }
                if let Some(v) = file.latency {
                    args.latency = Some(v);
                }
                if let Some(v) = file.latency_window {
                    args.latency_window = Some(v);
                }
                if let Some(v) = file.noise_sigma {
                    args.noise_sigma = v;
                }
                if let Some(v) = file.seed {
                    args.seed = v;
                }
                file_events = file.event_overrides;
            }

            let network = load_network(&args.case)?;
            let mut config = ScenarioConfig::new(parse_scenario(&args.scenario)?);
            config.modes = parse_modes(&args.modes)?;
            config.case_path = args.case.clone();
            config.duration = args.duration;
            config.weights = (args.w1, args.w2);
            if let Some(v) = args.primary_delay {
                config.delays.primary_delay = v;
            }
            if let Some(v) = args.estimation_delay {
                config.delays.estimation_delay = v;
            }
            if let Some(v) = args.stage_delay {
                config.delays.stage_solve_delay = v;
            }
            if let Some(v) = args.latency {
                config.delays.inter_area_latency = v;
            }
            config.latency_window = args.latency_window;
            config.estimator_noise_sigma = args.noise_sigma;
            config.seed = args.seed;
            config.output_dir = Some(args.out.clone());
            config.event_overrides = file_events;

            let artifacts = run_case(&network, &config)?;
            appf_core::scenario::write_artifacts(&artifacts, &args.out)?;
            for run in &artifacts.runs {
                let s = &run.summary;
                println!(
                    "{} [{}]: settle {} nadir {:.4} Hz, max |dV| {:.4} pu, final freq err {:.4} Hz",
                    s.scenario,
                    s.mode,
                    s.settling_time_s
                        .map(|t| format!("{t:.2} s"))
                        .unwrap_or_else(|| "-".into()),
                    s.freq_nadir_hz,
                    s.max_voltage_deviation_pu,
                    s.final_max_freq_error_hz,
                );
            }
            println!("artifacts written to {}", args.out.display());
            Ok(())
        }
        Command::Compare(args) => {
            let network = load_network(&args.case)?;
            let scenario = parse_scenario(&args.scenario)?;
            let table = compare_rpf_appf(&network, scenario.name(), &scenario.contingencies())?;
            std::fs::create_dir_all(&args.out)?;
            let json = serde_json::to_string_pretty(&table)?;
            std::fs::write(
                args.out.join(format!("{}_steady_state.json", scenario.name())),
                &json,
            )?;
            std::fs::write(
                args.out.join(format!("{}_steady_state.csv", scenario.name())),
                table.to_csv(),
            )?;
            println!(
                "{}: contingent-area IBR utilization {:.1}% (conventional) vs {:.1}% (staged)",
                scenario.name(),
                100.0 * table.rpf_utilization,
                100.0 * table.appf_utilization
            );
            println!("table written to {}", args.out.display());
            Ok(())
        }
        Command::ListScenarios => {
            println!("scenarios:");
            for id in ScenarioId::ALL {
                println!("  {:<13} {}", id.name(), id.describe());
            }
            println!("control modes:");
            for m in ControlMode::ALL {
                println!("  {}", m.name());
            }
            Ok(())
        }
        Command::ValidateCase { path } => {
            let network = load_case(&path)?;
            let solution =
                solve_regular_power_flow(&network, REFERENCE_SLACK_BUS, &NrOptions::default())
                    .map_err(|e| CaseError::BadConfig(format!("baseline power flow: {e}")))?;
            println!(
                "{}: {} buses, {} branches, {} SG, {} IBR, {} areas; baseline converged in {} \
                 iterations (max mismatch {:.2e})",
                path.display(),
                network.buses.len(),
                network.branches.len(),
                network.sg_units.len(),
                network.ibr_units.len(),
                network.areas.len(),
                solution.iterations,
                solution.max_mismatch
            );
            Ok(())
        }
    }
}
