//! Reference case construction, scenario definitions, and the harness that
//! runs the staged controls against the simulator and exports artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::coordinator::{
    CoordinatorSet, DelayConfig, PipelineControls, ScheduledContingency,
};
use crate::dynamics::{
    ControlSet, EventPayload, Frame, SimConfig, SimEvent, Simulator, Trajectory, NOMINAL_HZ,
};
use crate::error::CaseError;
use crate::freq::AppfOptions;
use crate::grid::{
    Area, Branch, Bus, BusKind, IbrUnit, LoadDemand, Network, SgUnit, BASE_MVA,
};
use crate::powerflow::{solve_regular_power_flow, NrOptions, PowerFlowSolution};
use crate::volt::VoltageBounds;

/// Slack bus of the reference case.
pub const REFERENCE_SLACK_BUS: usize = 1;

/// Pai/Chow 9-bus branch records: (from, to, r, x, b_total).
const NINE_BUS_BRANCHES: [(usize, usize, f64, f64, f64); 9] = [
    (1, 4, 0.0, 0.0576, 0.0),
    (2, 7, 0.0, 0.0625, 0.0),
    (3, 9, 0.0, 0.0586, 0.0),
    (4, 5, 0.010, 0.085, 0.176),
    (4, 6, 0.017, 0.092, 0.158),
    (5, 7, 0.032, 0.161, 0.306),
    (6, 9, 0.039, 0.170, 0.358),
    (7, 8, 0.0085, 0.072, 0.149),
    (8, 9, 0.0119, 0.1008, 0.209),
];

/// Per-replica SG dispatch (local bus 1, 2, 3), p.u.
const SG_DISPATCH: [[f64; 3]; 3] = [
    // Replica 1 hosts the system slack at its local bus 1; the dispatch
    // value seeds the governor reference and is refined by the base solve.
    [0.67, 1.35, 0.90],
    // Replica 2 is the study's contingent area; its lead machine carries
    // exactly 69 MW.
    [0.69, 1.00, 0.8647],
    [1.10, 0.92, 0.80],
];

/// Standard machine constants for the three-machine set: inertia and
/// voltage setpoints by local machine index.
const SG_INERTIA: [f64; 3] = [23.64, 6.4, 3.01];
const SG_VSET: [f64; 3] = [1.04, 1.025, 1.025];

/// Load scale of the contingent replica: chosen so the 63 MW study step is
/// 16.5% of that area's total demand.
const AREA2_LOAD_SCALE: f64 = 0.63 / 0.165 / 3.15;

/// Builds the 33-bus, 3-area reference system: three 9-bus replicas, two
/// IBRs each, tie lines in a triangle, and a baseline dispatch with
/// non-zero tie flows.
pub fn build_reference_case() -> Network {
    let mut buses = Vec::new();
    let mut branches = Vec::new();
    let mut sg_units = Vec::new();
    let mut ibr_units = Vec::new();
    let mut loads = BTreeMap::new();
    let mut areas = Vec::new();

    for replica in 0..3usize {
        let base = 11 * replica;
        let area_id = replica + 1;
        let load_scale = if replica == 1 { AREA2_LOAD_SCALE } else { 1.0 };

        for local in 1..=11usize {
            let id = base + local;
            let kind = match local {
                1..=3 => BusKind::Sg,
                5 | 6 | 8 => BusKind::Load,
                10 | 11 => BusKind::Ibr,
                _ => BusKind::Transfer,
            };
            let vset = if local <= 3 { SG_VSET[local - 1] } else { 1.0 };
            buses.push(Bus {
                id,
                kind,
                area_id,
                voltage_magnitude: vset,
                voltage_angle: 0.0,
                p_injection: 0.0,
                q_injection: 0.0,
                v_min: 0.95,
                v_max: 1.05,
            });
        }

        for &(f, t, r, x, b) in &NINE_BUS_BRANCHES {
            branches.push(Branch {
                from_bus: base + f,
                to_bus: base + t,
                series_impedance: Complex64::new(r, x),
                shunt_admittance: Complex64::new(0.0, b),
                thermal_rating_p: 2.5,
                is_tie_line: false,
            });
        }
        // IBR step-up connections: local 10 feeds the local-6 load pocket,
        // local 11 sits next to the local-5 load bus.
        branches.push(Branch {
            from_bus: base + 10,
            to_bus: base + 6,
            series_impedance: Complex64::new(0.0, 0.0625),
            shunt_admittance: Complex64::new(0.0, 0.0),
            thermal_rating_p: 1.0,
            is_tie_line: false,
        });
        branches.push(Branch {
            from_bus: base + 11,
            to_bus: base + 5,
            series_impedance: Complex64::new(0.0, 0.0576),
            shunt_admittance: Complex64::new(0.0, 0.0),
            thermal_rating_p: 1.0,
            is_tie_line: false,
        });

        for (i, &p) in SG_DISPATCH[replica].iter().enumerate() {
            sg_units.push(SgUnit {
                bus_id: base + 1 + i,
                p_set: p,
                q_set: 0.0,
                p_min: 0.0,
                p_max: if i == 0 { 2.5 } else { 2.0 },
                q_min: -1.0,
                q_max: 1.5,
                inertia_h: SG_INERTIA[i],
                damping_d: 2.0,
                droop_r: 0.05,
                governor_time_constant: 0.25,
                avr_gain: 30.0,
                avr_time_constant: 0.5,
                agc_participation_factor: [0.4, 0.3, 0.3][i],
            });
        }
        for local in [10usize, 11] {
            ibr_units.push(IbrUnit {
                bus_id: base + local,
                p_set: 0.35,
                q_set: 0.10,
                s_max: 0.7548,
                p_min: 0.0,
                p_max: 0.7548,
                q_min: -0.60,
                q_max: 0.60,
                actuation_time_constant: 0.01,
            });
        }

        for (local, p, q) in [(5usize, 1.25, 0.50), (6, 0.90, 0.30), (8, 1.00, 0.35)] {
            loads.insert(
                base + local,
                LoadDemand {
                    p: p * load_scale,
                    q,
                },
            );
        }

        areas.push(Area {
            id: area_id,
            name: format!("Area {area_id}"),
            bus_ids: (base + 1..=base + 11).collect(),
        });
    }

    // Tie-line triangle between the transfer buses.
    for (f, t) in [(9usize, 15usize), (20, 26), (31, 4)] {
        branches.push(Branch {
            from_bus: f,
            to_bus: t,
            series_impedance: Complex64::new(0.05, 0.20),
            shunt_admittance: Complex64::new(0.0, 0.15),
            thermal_rating_p: 2.0,
            is_tie_line: true,
        });
    }

    let mut network = Network {
        buses,
        branches,
        sg_units,
        ibr_units,
        loads,
        areas,
        base_mva: BASE_MVA,
    };

    // Record the scheduled injections on the bus records.
    for i in 0..network.buses.len() {
        let id = network.buses[i].id;
        let (p, q) = network.scheduled_injection(id);
        network.buses[i].p_injection = p;
        network.buses[i].q_injection = q;
    }
    network
}

pub fn load_case(path: &std::path::Path) -> Result<Network, CaseError> {
    let text = std::fs::read_to_string(path)?;
    let network: Network = serde_json::from_str(&text)?;
    network.validate()?;
    Ok(network)
}

pub fn save_case(network: &Network, path: &std::path::Path) -> Result<(), CaseError> {
    let text = serde_json::to_string_pretty(network)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioId {
    Case1,
    Case2,
    GenTrip,
    Volt,
    Simultaneous,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 5] = [
        ScenarioId::Case1,
        ScenarioId::Case2,
        ScenarioId::GenTrip,
        ScenarioId::Volt,
        ScenarioId::Simultaneous,
    ];

    pub fn parse(s: &str) -> Option<ScenarioId> {
        match s {
            "case1" => Some(ScenarioId::Case1),
            "case2" => Some(ScenarioId::Case2),
            "gen-trip" => Some(ScenarioId::GenTrip),
            "volt" => Some(ScenarioId::Volt),
            "simultaneous" => Some(ScenarioId::Simultaneous),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioId::Case1 => "case1",
            ScenarioId::Case2 => "case2",
            ScenarioId::GenTrip => "gen-trip",
            ScenarioId::Volt => "volt",
            ScenarioId::Simultaneous => "simultaneous",
        }
    }

    pub fn describe(&self) -> &'static str {
        match self {
            ScenarioId::Case1 => "63 MW load step at bus 16 (self-sufficient area)",
            ScenarioId::Case2 => "130 MW load step at bus 16 (self-deficient area)",
            ScenarioId::GenTrip => "trip of the 69 MW machine at bus 12",
            ScenarioId::Volt => "105 MVAR load step at bus 16",
            ScenarioId::Simultaneous => "80 MW + 50 MVAR load step at bus 16",
        }
    }

    pub fn default_duration(&self) -> f64 {
        match self {
            ScenarioId::Case1 => 60.0,
            ScenarioId::Case2 => 70.0,
            ScenarioId::GenTrip => 70.0,
            ScenarioId::Volt => 40.0,
            ScenarioId::Simultaneous => 70.0,
        }
    }

    /// The disturbance list: `(time, bus, dp, dq, tripped unit)`.
    pub fn contingencies(&self) -> Vec<ScheduledContingency> {
        match self {
            ScenarioId::Case1 => vec![ScheduledContingency {
                time: 10.0,
                bus_id: 16,
                dp: 0.63,
                dq: 0.0,
                tripped_sg: None,
            }],
            ScenarioId::Case2 => vec![ScheduledContingency {
                time: 10.0,
                bus_id: 16,
                dp: 1.30,
                dq: 0.0,
                tripped_sg: None,
            }],
            ScenarioId::GenTrip => vec![ScheduledContingency {
                time: 10.0,
                bus_id: 12,
                dp: 0.69,
                dq: 0.0,
                tripped_sg: Some(12),
            }],
            ScenarioId::Volt => vec![ScheduledContingency {
                time: 10.0,
                bus_id: 16,
                dp: 0.0,
                dq: 1.05,
                tripped_sg: None,
            }],
            ScenarioId::Simultaneous => vec![ScheduledContingency {
                time: 10.0,
                bus_id: 16,
                dp: 0.80,
                dq: 0.50,
                tripped_sg: None,
            }],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    None,
    Droop,
    Hierarchical,
    HierarchicalDroop,
    AgcOnly,
}

impl ControlMode {
    pub const ALL: [ControlMode; 5] = [
        ControlMode::None,
        ControlMode::Droop,
        ControlMode::Hierarchical,
        ControlMode::HierarchicalDroop,
        ControlMode::AgcOnly,
    ];

    pub fn parse(s: &str) -> Option<ControlMode> {
        match s {
            "none" => Some(ControlMode::None),
            "droop" => Some(ControlMode::Droop),
            "hierarchical" => Some(ControlMode::Hierarchical),
            "hierarchical+droop" | "hierarchical-droop" => Some(ControlMode::HierarchicalDroop),
            "agc-only" => Some(ControlMode::AgcOnly),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControlMode::None => "none",
            ControlMode::Droop => "droop",
            ControlMode::Hierarchical => "hierarchical",
            ControlMode::HierarchicalDroop => "hierarchical+droop",
            ControlMode::AgcOnly => "agc-only",
        }
    }

    fn device_controls(&self) -> ControlSet {
        match self {
            ControlMode::None => ControlSet {
                agc: false,
                ibr_droop: false,
            },
            ControlMode::Droop => ControlSet {
                agc: false,
                ibr_droop: true,
            },
            ControlMode::AgcOnly => ControlSet {
                agc: true,
                ibr_droop: false,
            },
            ControlMode::Hierarchical => ControlSet {
                agc: true,
                ibr_droop: false,
            },
            ControlMode::HierarchicalDroop => ControlSet {
                agc: true,
                ibr_droop: true,
            },
        }
    }

    fn pipelines(&self) -> PipelineControls {
        match self {
            ControlMode::Hierarchical | ControlMode::HierarchicalDroop => PipelineControls {
                freq_appf: true,
                volt_appf: true,
            },
            _ => PipelineControls::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: ScenarioId,
    pub modes: Vec<ControlMode>,
    /// Optional case file; the built-in 33-bus system otherwise.
    pub case_path: Option<std::path::PathBuf>,
    pub duration: Option<f64>,
    pub weights: (f64, f64),
    pub delays: DelayConfig,
    /// Randomize the inter-area latency inside this window (robustness
    /// runs); applied once per run from the seed.
    pub latency_window: Option<(f64, f64)>,
    /// Gaussian noise applied to the estimated reactive imbalance.
    pub estimator_noise_sigma: f64,
    pub seed: u64,
    pub output_dir: Option<std::path::PathBuf>,
    /// Replaces the scenario's built-in disturbance list when set.
    pub event_overrides: Option<Vec<ScheduledContingency>>,
}

impl ScenarioConfig {
    pub fn new(scenario: ScenarioId) -> Self {
        ScenarioConfig {
            scenario,
            modes: vec![ControlMode::Hierarchical],
            case_path: None,
            duration: None,
            weights: (1.0, 1.0),
            delays: DelayConfig::default(),
            latency_window: None,
            estimator_noise_sigma: 0.0,
            seed: 0,
            output_dir: None,
            event_overrides: None,
        }
    }
}

/// Per-area total incoming tie power and total generation at an operating
/// point: the detector baselines.
pub fn area_baselines(
    network: &Network,
    solution: &PowerFlowSolution,
) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let mut tie: BTreeMap<usize, f64> = BTreeMap::new();
    let mut gen: BTreeMap<usize, f64> = BTreeMap::new();
    for a in &network.areas {
        tie.insert(a.id, 0.0);
        gen.insert(a.id, 0.0);
    }
    for br in network.branches.iter().filter(|b| b.is_tie_line) {
        let kf = network.bus_index(br.from_bus).unwrap();
        let kt = network.bus_index(br.to_bus).unwrap();
        let f = crate::powerflow::line_flow(
            br,
            solution.bus_state[kf].voltage(),
            solution.bus_state[kt].voltage(),
        );
        *tie.entry(network.bus(br.from_bus).unwrap().area_id).or_default() += -f.p_from;
        *tie.entry(network.bus(br.to_bus).unwrap().area_id).or_default() += -f.p_to;
    }
    for u in &network.sg_units {
        let k = network.bus_index(u.bus_id).unwrap();
        let mut p = solution.bus_state[k].p;
        if let Some(l) = network.loads.get(&u.bus_id) {
            p += l.p;
        }
        *gen.entry(network.bus(u.bus_id).unwrap().area_id).or_default() += p;
    }
    for u in &network.ibr_units {
        *gen.entry(network.bus(u.bus_id).unwrap().area_id).or_default() += u.p_set;
    }
    (tie, gen)
}

/// Deterministic 64-bit generator for the robustness knobs.
#[derive(Debug, Clone)]
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + u * (hi - lo)
    }

    /// Box-Muller transform.
    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        let u1 = self.uniform(f64::MIN_POSITIVE, 1.0);
        let u2 = self.uniform(0.0, 1.0);
        sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Per-mode run summary; every metric derives from the trajectory alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSummary {
    pub scenario: String,
    pub mode: String,
    /// Last time any bus frequency sat outside 60 +/- 0.01 Hz, when the
    /// band holds through the end of the run.
    pub settling_time_s: Option<f64>,
    pub freq_nadir_hz: f64,
    pub max_voltage_deviation_pu: f64,
    pub final_max_freq_error_hz: f64,
    pub final_bus_vm: Vec<f64>,
    /// `(bus, used fraction of the active headroom at t = 0)`.
    pub ibr_utilization: Vec<(usize, f64)>,
    pub max_balance_residual: f64,
    pub events: Vec<(f64, String)>,
    pub config_hash: u64,
}

const SETTLE_BAND_HZ: f64 = 0.01;

/// Metrics from a trajectory; `ibr_caps` maps IBR bus id to its active
/// capability for the utilization figures.
pub fn summarize(
    traj: &Trajectory,
    scenario: &str,
    mode: &str,
    ibr_caps: &BTreeMap<usize, f64>,
    config_hash: u64,
) -> ModeSummary {
    let mut nadir = f64::INFINITY;
    let mut settle: Option<f64> = Some(traj.times.first().copied().unwrap_or(0.0));
    for (i, t) in traj.times.iter().enumerate() {
        for f in &traj.bus_freq[i] {
            nadir = nadir.min(*f);
            if (f - NOMINAL_HZ).abs() > SETTLE_BAND_HZ {
                settle = Some(*t);
            }
        }
    }
    // Sustained only when a tail of at least two seconds stayed in band.
    let end = traj.times.last().copied().unwrap_or(0.0);
    let settling_time_s = match settle {
        Some(t) if end - t >= 2.0 => Some(t),
        Some(_) => None,
        None => None,
    };

    let v0 = traj.bus_vm.first().cloned().unwrap_or_default();
    let mut max_dev = 0.0f64;
    for row in &traj.bus_vm {
        for (v, v_base) in row.iter().zip(&v0) {
            max_dev = max_dev.max((v - v_base).abs());
        }
    }

    let final_freq = traj
        .bus_freq
        .last()
        .map(|row| {
            row.iter()
                .map(|f| (f - NOMINAL_HZ).abs())
                .fold(0.0f64, f64::max)
        })
        .unwrap_or(0.0);

    let p0 = traj.ibr_p.first().cloned().unwrap_or_default();
    let p_end = traj.ibr_p.last().cloned().unwrap_or_default();
    let ibr_utilization = traj
        .ibr_bus_ids
        .iter()
        .enumerate()
        .map(|(i, &bus)| {
            let cap = ibr_caps.get(&bus).copied().unwrap_or(f64::INFINITY);
            let head = (cap - p0.get(i).copied().unwrap_or(0.0)).max(1e-12);
            let used = (p_end.get(i).copied().unwrap_or(0.0) - p0.get(i).copied().unwrap_or(0.0))
                / head;
            (bus, used)
        })
        .collect();

    ModeSummary {
        scenario: scenario.to_string(),
        mode: mode.to_string(),
        settling_time_s,
        freq_nadir_hz: nadir,
        max_voltage_deviation_pu: max_dev,
        final_max_freq_error_hz: final_freq,
        final_bus_vm: traj.bus_vm.last().cloned().unwrap_or_default(),
        ibr_utilization,
        max_balance_residual: traj.max_balance_residual,
        events: traj.events.clone(),
        config_hash,
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One mode's artifacts.
#[derive(Debug, Clone)]
pub struct ModeArtifacts {
    pub mode: ControlMode,
    pub trajectory: Trajectory,
    pub summary: ModeSummary,
    pub csv: String,
    pub summary_json: String,
    /// Message trace, one JSON object per line.
    pub message_trace: String,
}

#[derive(Debug, Clone)]
pub struct CaseArtifacts {
    pub scenario: ScenarioId,
    pub runs: Vec<ModeArtifacts>,
    pub steady_state: Option<SteadyStateTable>,
}

/// Everything one mode's run produced.
#[derive(Debug)]
pub struct ScenarioRun {
    pub trajectory: Trajectory,
    pub messages: Vec<crate::coordinator::Message>,
    /// The staged response computed by the coordinators, when one ran.
    pub timeline: Option<crate::coordinator::Timeline>,
    pub fallback: bool,
}

/// Runs one scenario in one control mode to a trajectory.
pub fn run_scenario(
    network: &Network,
    config: &ScenarioConfig,
    mode: ControlMode,
) -> Result<ScenarioRun, CaseError> {
    let duration = config
        .duration
        .unwrap_or_else(|| config.scenario.default_duration());
    let contingencies = config
        .event_overrides
        .clone()
        .unwrap_or_else(|| config.scenario.contingencies());
    let events: Vec<SimEvent> = contingencies
        .iter()
        .map(|c| {
            if let Some(sg_bus) = c.tripped_sg {
                SimEvent {
                    time: c.time,
                    payload: EventPayload::GeneratorTrip { bus_id: sg_bus },
                }
            } else {
                SimEvent {
                    time: c.time,
                    payload: EventPayload::LoadStep {
                        bus_id: c.bus_id,
                        dp: c.dp,
                        dq: c.dq,
                    },
                }
            }
        })
        .collect();

    let mut delays = config.delays;
    let mut rng = SplitMix64(config.seed ^ 0xA5A5_5A5A_DEAD_BEEF);
    if let Some((lo, hi)) = config.latency_window {
        delays.inter_area_latency = rng.uniform(lo, hi);
    }

    let mut sim = Simulator::new(
        network.clone(),
        REFERENCE_SLACK_BUS,
        events,
        mode.device_controls(),
        SimConfig::default(),
    )
    .map_err(|e| CaseError::Simulation(e.to_string()))?;

    let x_star = sim.initial_solution.clone();
    let (baseline_tie, baseline_gen) = area_baselines(network, &x_star);

    let mut appf = AppfOptions::default();
    appf.weights.w1 = config.weights.0;
    appf.weights.w2 = config.weights.1;

    let mut oracle = contingencies;
    if config.estimator_noise_sigma > 0.0 {
        for c in &mut oracle {
            if c.dq.abs() > 0.0 {
                c.dq += rng.gaussian(config.estimator_noise_sigma);
            }
        }
    }

    let mut coord = CoordinatorSet::new(
        network.clone(),
        x_star,
        REFERENCE_SLACK_BUS,
        oracle,
        mode.pipelines(),
        delays,
        VoltageBounds::default(),
        appf,
        baseline_tie,
        baseline_gen,
    );

    let trajectory = sim
        .run_with_observer(duration, &mut |frame: &Frame, inject: &mut Vec<SimEvent>| {
            coord.observe(frame, inject);
        })
        .map_err(|e| CaseError::Simulation(e.to_string()))?;
    Ok(ScenarioRun {
        trajectory,
        messages: coord.message_trace,
        timeline: coord.timeline,
        fallback: coord.fallback,
    })
}

/// Runs a scenario under each requested control mode and assembles the
/// artifacts, including the steady-state comparison table.
pub fn run_case(network: &Network, config: &ScenarioConfig) -> Result<CaseArtifacts, CaseError> {
    let hash = fnv1a(format!("{config:?}").as_bytes());
    let caps: BTreeMap<usize, f64> = network
        .ibr_units
        .iter()
        .map(|u| (u.bus_id, u.p_max.min(u.s_max)))
        .collect();

    let mut runs = Vec::new();
    for &mode in &config.modes {
        let run = run_scenario(network, config, mode)?;
        let (trajectory, messages) = (run.trajectory, run.messages);
        let summary = summarize(
            &trajectory,
            config.scenario.name(),
            mode.name(),
            &caps,
            hash,
        );
        let csv = trajectory.to_csv();
        let summary_json = serde_json::to_string_pretty(&summary)
            .map_err(CaseError::Parse)?;
        let mut message_trace = String::new();
        for m in &messages {
            let _ = writeln!(
                message_trace,
                "{}",
                serde_json::to_string(m).map_err(CaseError::Parse)?
            );
        }
        runs.push(ModeArtifacts {
            mode,
            trajectory,
            summary,
            csv,
            summary_json,
            message_trace,
        });
    }

    let steady_state = compare_rpf_appf(
        network,
        config.scenario.name(),
        &config.scenario.contingencies(),
    )
    .ok();
    Ok(CaseArtifacts {
        scenario: config.scenario,
        runs,
        steady_state,
    })
}

/// Writes one scenario's artifacts under `dir`.
pub fn write_artifacts(artifacts: &CaseArtifacts, dir: &std::path::Path) -> Result<(), CaseError> {
    std::fs::create_dir_all(dir)?;
    let scen = artifacts.scenario.name();
    for run in &artifacts.runs {
        let mode = run.mode.name().replace('+', "_");
        std::fs::write(dir.join(format!("{scen}_{mode}.csv")), &run.csv)?;
        std::fs::write(
            dir.join(format!("{scen}_{mode}_summary.json")),
            &run.summary_json,
        )?;
        if !run.message_trace.is_empty() {
            std::fs::write(
                dir.join(format!("{scen}_{mode}_messages.jsonl")),
                &run.message_trace,
            )?;
        }
    }
    if let Some(table) = &artifacts.steady_state {
        std::fs::write(
            dir.join(format!("{scen}_steady_state.json")),
            serde_json::to_string_pretty(table).map_err(CaseError::Parse)?,
        )?;
        std::fs::write(dir.join(format!("{scen}_steady_state.csv")), table.to_csv())?;
    }
    Ok(())
}

/// Per-bus pre/post comparison between a conventional redispatch and the
/// staged dispatch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteadyStateTable {
    pub scenario: String,
    pub rows: Vec<SteadyStateRow>,
    /// Contingent-area IBR utilization under each route.
    pub rpf_utilization: f64,
    pub appf_utilization: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteadyStateRow {
    pub bus_id: usize,
    pub kind: String,
    pub p_pre: f64,
    pub q_pre: f64,
    pub vm_pre: f64,
    pub p_rpf: f64,
    pub q_rpf: f64,
    pub vm_rpf: f64,
    pub p_appf: f64,
    pub q_appf: f64,
    pub vm_appf: f64,
}

impl SteadyStateTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "bus,kind,p_pre,q_pre,vm_pre,p_rpf,q_rpf,vm_rpf,p_appf,q_appf,vm_appf\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
                r.bus_id,
                r.kind,
                r.p_pre,
                r.q_pre,
                r.vm_pre,
                r.p_rpf,
                r.q_rpf,
                r.vm_rpf,
                r.p_appf,
                r.q_appf,
                r.vm_appf
            );
        }
        out
    }
}

/// Applies a disturbance list to a copy of the network data.
fn disturbed_network(
    network: &Network,
    contingencies: &[ScheduledContingency],
) -> (Network, BTreeSet<usize>) {
    let mut net = network.clone();
    let mut tripped = BTreeSet::new();
    for c in contingencies {
        if let Some(sg_bus) = c.tripped_sg {
            net.sg_units.retain(|u| u.bus_id != sg_bus);
            tripped.insert(sg_bus);
            // Participation factors renormalize within the area.
            let area = net.bus(sg_bus).map(|b| b.area_id).unwrap_or(0);
            let total: f64 = net
                .sg_units
                .iter()
                .filter(|u| net.bus(u.bus_id).map(|b| b.area_id) == Some(area))
                .map(|u| u.agc_participation_factor)
                .sum();
            if total > 0.0 {
                for u in &mut net.sg_units {
                    if net.buses.iter().any(|b| b.id == u.bus_id && b.area_id == area) {
                        u.agc_participation_factor /= total;
                    }
                }
            }
        } else {
            let e = net.loads.entry(c.bus_id).or_insert(LoadDemand { p: 0.0, q: 0.0 });
            e.p += c.dp;
            e.q += c.dq;
        }
    }
    (net, tripped)
}

/// Conventional post-contingency redispatch (the slack absorbs the
/// imbalance, then the SGs share it in proportion) versus the staged
/// dispatch; quantifies how much of the contingent-area IBR capability
/// each route uses.
pub fn compare_rpf_appf(
    network: &Network,
    label: &str,
    contingencies: &[ScheduledContingency],
) -> Result<SteadyStateTable, CaseError> {
    let opts = NrOptions::default();
    let x_star = solve_regular_power_flow(network, REFERENCE_SLACK_BUS, &opts)
        .map_err(|e| CaseError::BadConfig(e.to_string()))?;

    let (disturbed, _tripped) = disturbed_network(network, contingencies);

    // Route 1: conventional. First solve lets the slack absorb everything;
    // the SG redispatch then spreads the slack excursion proportionally.
    let first = solve_regular_power_flow(&disturbed, REFERENCE_SLACK_BUS, &opts)
        .map_err(|e| CaseError::BadConfig(e.to_string()))?;
    let slack_idx = disturbed.bus_index(REFERENCE_SLACK_BUS).unwrap();
    let excursion = first.bus_state[slack_idx].p - x_star.bus_state[slack_idx].p;
    let mut redispatched = disturbed.clone();
    let total_cap: f64 = redispatched
        .sg_units
        .iter()
        .filter(|u| u.bus_id != REFERENCE_SLACK_BUS)
        .map(|u| u.p_max - u.p_set)
        .sum();
    if total_cap > 0.0 {
        for u in &mut redispatched.sg_units {
            if u.bus_id == REFERENCE_SLACK_BUS {
                continue;
            }
            let share = (u.p_max - u.p_set) / total_cap;
            u.p_set = (u.p_set + share * excursion * 0.5).clamp(u.p_min, u.p_max);
        }
    }
    let rpf = solve_regular_power_flow(&redispatched, REFERENCE_SLACK_BUS, &opts)
        .map_err(|e| CaseError::BadConfig(e.to_string()))?;

    // Route 2: staged dispatch applied to the IBR setpoints, then a plain
    // solve of the updated network.
    let contingent_bus = contingencies.first().map(|c| c.bus_id).unwrap_or(16);
    let contingent_area = network
        .bus(contingent_bus)
        .map(|b| b.area_id)
        .ok_or_else(|| CaseError::BadConfig("contingent bus missing".into()))?;
    let partition = crate::grid::assign_hierarchies(network, contingent_area)
        .map_err(CaseError::Grid)?;

    let mut inputs = crate::freq::ContingencyInputs::default();
    for c in contingencies {
        let e = inputs.load_overrides.entry(c.bus_id).or_insert((0.0, 0.0));
        e.0 += c.dp;
        e.1 += c.dq;
        inputs.dp_load += c.dp;
        if let Some(sg) = c.tripped_sg {
            inputs.tripped_sg.insert(sg);
        }
    }

    let appf_opts = AppfOptions::default();
    let mut appf_net = disturbed.clone();
    if inputs.dp_load.abs() > 1e-12 {
        let primaries = crate::freq::primary_dispatch_chain(
            network,
            &partition,
            inputs.dp_load,
            &|_| true,
        );
        let stages =
            crate::freq::run_appf(network, &partition, &x_star, &inputs, &primaries, &appf_opts)
                .map_err(|e| CaseError::BadConfig(e.to_string()))?;
        for stage in &stages {
            for &(bus_id, p, q) in &stage.ibr_setpoints {
                if let Some(u) = appf_net.ibr_units.iter_mut().find(|u| u.bus_id == bus_id) {
                    u.p_set = p;
                    u.q_set = q;
                }
            }
        }
    }
    let appf = solve_regular_power_flow(&appf_net, REFERENCE_SLACK_BUS, &opts)
        .map_err(|e| CaseError::BadConfig(e.to_string()))?;

    let mut rows = Vec::new();
    for (k, bus) in network.buses.iter().enumerate() {
        rows.push(SteadyStateRow {
            bus_id: bus.id,
            kind: format!("{:?}", bus.kind),
            p_pre: x_star.bus_state[k].p,
            q_pre: x_star.bus_state[k].q,
            vm_pre: x_star.bus_state[k].vm,
            p_rpf: rpf.bus_state[k].p,
            q_rpf: rpf.bus_state[k].q,
            vm_rpf: rpf.bus_state[k].vm,
            p_appf: appf.bus_state[k].p,
            q_appf: appf.bus_state[k].q,
            vm_appf: appf.bus_state[k].vm,
        });
    }

    let utilization = |sol: &PowerFlowSolution| -> f64 {
        let mut used = 0.0;
        let mut avail = 0.0;
        for u in network.ibr_units.iter() {
            let area = network.bus(u.bus_id).map(|b| b.area_id);
            if area != Some(contingent_area) {
                continue;
            }
            let k = network.bus_index(u.bus_id).unwrap();
            used += (sol.bus_state[k].p - x_star.bus_state[k].p).max(0.0);
            avail += (u.p_max.min(u.s_max) - u.p_set).max(0.0);
        }
        if avail > 0.0 {
            used / avail
        } else {
            0.0
        }
    };

    Ok(SteadyStateTable {
        scenario: label.to_string(),
        rpf_utilization: utilization(&rpf),
        appf_utilization: utilization(&appf),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_case_shape() {
        let net = build_reference_case();
        net.validate().unwrap();
        assert_eq!(net.buses.len(), 33);
        assert_eq!(net.areas.len(), 3);
        assert_eq!(net.ibr_units.len(), 6);
        assert_eq!(net.sg_units.len(), 9);
        // The study's devices sit on the documented buses.
        assert!(net.ibr_at(21).is_some() && net.ibr_at(22).is_some());
        assert!(net.sg_at(12).is_some());
        assert!(net.loads.contains_key(&16));
    }

    #[test]
    fn reference_case_anchors() {
        let net = build_reference_case();
        // 63 MW is 16.5% of the contingent area's load.
        let area2_load: f64 = net
            .loads
            .iter()
            .filter(|(id, _)| (12..=22).contains(*id))
            .map(|(_, l)| l.p)
            .sum();
        assert!((0.63 / area2_load - 0.165).abs() < 1e-6);
        // 105 MVAR is 30.4% of the system reactive load.
        let q_total: f64 = net.loads.values().map(|l| l.q).sum();
        assert!((1.05 / q_total - 0.304).abs() < 5e-3);
        // The 69 MW machine carries 21.2% of its area's generation.
        let area2_gen: f64 = net
            .sg_units
            .iter()
            .filter(|u| (12..=22).contains(&u.bus_id))
            .map(|u| u.p_set)
            .sum::<f64>()
            + net
                .ibr_units
                .iter()
                .filter(|u| (12..=22).contains(&u.bus_id))
                .map(|u| u.p_set)
                .sum::<f64>();
        assert!((0.69 / area2_gen - 0.212).abs() < 1e-3);
    }

    #[test]
    fn reference_case_baseline_flows() {
        let net = build_reference_case();
        let sol = solve_regular_power_flow(&net, REFERENCE_SLACK_BUS, &NrOptions::default())
            .unwrap();
        assert!(sol.converged);
        assert!(sol.max_mismatch <= 1e-8);
        // Every tie line carries nonzero active power.
        for br in net.branches.iter().filter(|b| b.is_tie_line) {
            let kf = net.bus_index(br.from_bus).unwrap();
            let kt = net.bus_index(br.to_bus).unwrap();
            let f = crate::powerflow::line_flow(
                br,
                sol.bus_state[kf].voltage(),
                sol.bus_state[kt].voltage(),
            );
            assert!(
                f.p_from.abs() > 0.02,
                "tie {}-{} nearly flat: {}",
                br.from_bus,
                br.to_bus,
                f.p_from
            );
        }
        // Baseline voltages healthy.
        for b in &sol.bus_state {
            assert!(b.vm > 0.95 && b.vm < 1.06, "baseline |V| = {}", b.vm);
        }
    }

    #[test]
    fn case_file_round_trip() {
        let net = build_reference_case();
        let dir = std::env::temp_dir().join("appf_case_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("case33.json");
        save_case(&net, &path).unwrap();
        let loaded = load_case(&path).unwrap();
        let a = serde_json::to_string(&net).unwrap();
        let b = serde_json::to_string(&loaded).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splitmix_deterministic() {
        let mut a = SplitMix64(42);
        let mut b = SplitMix64(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let g = SplitMix64(7).gaussian(1.0);
        assert!(g.is_finite());
    }
}
