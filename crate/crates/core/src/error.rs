//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("bus {0} referenced but not defined")]
    UnknownBus(usize),
    #[error("area {0} referenced but not defined")]
    UnknownArea(usize),
    #[error("bus {0} appears in {1} areas; areas must partition the bus set")]
    OverlappingAreas(usize, usize),
    #[error("branch {from}-{to} has (near-)zero series impedance")]
    DegenerateBranch { from: usize, to: usize },
    #[error("branch {from}-{to}: is_tie_line flag inconsistent with endpoint areas")]
    TieFlagMismatch { from: usize, to: usize },
    #[error("bus {bus}: {what}")]
    InvalidBus { bus: usize, what: String },
    #[error("unit at bus {bus}: {what}")]
    InvalidUnit { bus: usize, what: String },
    #[error("area {area}: SG participation factors sum to {sum}, expected 1")]
    ParticipationSum { area: usize, sum: f64 },
    #[error("duplicate bus id {0}")]
    DuplicateBus(usize),
}

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("variable mask invalid at bus {bus}: {what}")]
    BadMask { bus: usize, what: String },
    #[error("jacobian singular at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("power flow diverged after {iterations} iterations (max mismatch {max_mismatch:.3e})")]
    Diverged {
        iterations: usize,
        max_mismatch: f64,
        last: Box<crate::powerflow::PowerFlowSolution>,
    },
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("stage problem has no voltage-anchored bus; cannot fix the angle reference")]
    NoReference,
    #[error("inner power-flow solve failed: {0}")]
    Inner(#[from] PowerFlowError),
    #[error("infeasible: most violated constraint is {constraint} (violation {violation:.3e})")]
    Infeasible { constraint: String, violation: f64 },
    #[error(
        "optimizer did not converge: optimality {optimality:.3e}, max violation {violation:.3e}"
    )]
    NotConverged {
        optimality: f64,
        violation: f64,
        last: Box<crate::powerflow::PowerFlowSolution>,
    },
    #[error("stage {level} requires the result of stage {missing}")]
    MissingUpstream { level: usize, missing: usize },
    #[error("bad stage specification: {0}")]
    BadSpec(String),
}

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("operating point has not converged")]
    UnconvergedOperatingPoint,
    #[error("power-flow jacobian singular at the operating point (voltage-collapse proximity)")]
    Singular,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("network solve diverged at t = {time:.4} s")]
    NetworkDiverged { time: f64 },
    #[error("instability: |speed deviation| exceeded {limit} p.u. at t = {time:.4} s")]
    Unstable { time: f64, limit: f64 },
    #[error("time step {0} s exceeds the 1 ms stability limit")]
    StepTooLarge(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

#[derive(Debug, Error)]
pub enum AppfError {
    #[error("stage {level} infeasible; {partial} stage(s) completed before abort")]
    StageInfeasible {
        level: usize,
        partial: usize,
        #[source]
        source: StageError,
    },
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("unknown scenario id {0:?}")]
    UnknownScenario(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("simulation: {0}")]
    Simulation(String),
}
