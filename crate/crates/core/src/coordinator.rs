//! Per-area coordinator state machines, the simulated inter-area message
//! fabric, and the orchestration that turns a detection into a timed
//! cascade of device commands.
//!
//! Coordinators are logical processes driven by the simulator's sampling
//! loop; the wide-area network is modeled as delayed FIFO channels.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dynamics::{DispatchCommand, EventPayload, Frame, SimEvent};
use crate::error::AppfError;
use crate::freq::{
    primary_dispatch_chain, run_appf, ActiveImbalanceDetector, AppfOptions, ContingencyInputs,
    DetectorVerdict, PrimaryDispatch, StageResult,
};
use crate::grid::{
    assign_hierarchies, compute_headroom, HeadroomMode, HierarchyPartition, Network,
};
use crate::powerflow::PowerFlowSolution;
use crate::volt::{
    compute_sensitivity, primary_reactive_dispatch, rank_and_classify,
    sequential_voltage_optimization, IbrClassPartition, VoltOutcome, VoltageBandDetector,
    VoltageBounds,
};

/// Coordinator life-cycle phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Detected,
    PrimaryDispatched,
    StageSolving,
    AwaitingUpstream,
    Complete,
    FallbackAgc,
}

/// Stimuli that move a coordinator between phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordEvent {
    Detect,
    PrimaryApplied,
    StartStage,
    DeficitPending,
    UpstreamComplete,
    StageComplete,
    Overlap,
    Reset,
}

impl Phase {
    /// The legal transition relation.
    pub fn next(self, ev: CoordEvent) -> Option<Phase> {
        use CoordEvent::*;
        use Phase::*;
        match (self, ev) {
            (Idle, Detect) => Some(Detected),
            (Detected, PrimaryApplied) => Some(PrimaryDispatched),
            (PrimaryDispatched, StartStage) => Some(StageSolving),
            (StageSolving, StageComplete) => Some(Complete),
            (StageSolving, DeficitPending) => Some(AwaitingUpstream),
            (AwaitingUpstream, UpstreamComplete) => Some(Complete),
            (Detected | PrimaryDispatched | StageSolving | AwaitingUpstream, Overlap) => {
                Some(FallbackAgc)
            }
            (Complete | FallbackAgc, Reset) => Some(Idle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Coordinator {
    pub area_id: usize,
    pub phase: Phase,
    /// Scheduled `(time, event)` pairs consumed as the clock advances.
    pending: Vec<(f64, CoordEvent)>,
    /// Out-of-order measurement frames dropped.
    pub dropped_frames: usize,
    last_frame_time: f64,
}

impl Coordinator {
    pub fn new(area_id: usize) -> Self {
        Coordinator {
            area_id,
            phase: Phase::Idle,
            pending: Vec::new(),
            dropped_frames: 0,
            last_frame_time: f64::NEG_INFINITY,
        }
    }

    pub fn apply(&mut self, ev: CoordEvent) -> Result<Phase, (Phase, CoordEvent)> {
        match self.phase.next(ev) {
            Some(p) => {
                self.phase = p;
                Ok(p)
            }
            None => Err((self.phase, ev)),
        }
    }

    fn schedule(&mut self, time: f64, ev: CoordEvent) {
        self.pending.push((time, ev));
        self.pending
            .sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }

    fn advance(&mut self, time: f64) {
        while let Some(&(t, ev)) = self.pending.first() {
            if t > time {
                break;
            }
            self.pending.remove(0);
            let _ = self.apply(ev);
        }
    }

    fn note_frame(&mut self, time: f64) -> bool {
        if time < self.last_frame_time {
            self.dropped_frames += 1;
            return false;
        }
        self.last_frame_time = time;
        true
    }
}

/// Inter-coordinator payloads. Only tie-line targets, deficits, headroom
/// sums and device commands ever cross a channel; interior bus states stay
/// inside the area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MessageKind {
    DeficitRequest { dp_req: f64 },
    TieTargets { lines: Vec<(usize, f64, f64)> },
    HeadroomUpdate { total: f64 },
    SetpointCommand { commands: Vec<DispatchCommand> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub source: usize,
    pub destination: usize,
    pub send_time: f64,
    pub delivery_time: f64,
    /// Per-channel FIFO sequence number.
    pub sequence: u64,
}

/// Delays of the cyber layer, seconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DelayConfig {
    /// Contingency onset to first primary actuation.
    pub primary_delay: f64,
    /// Onset to the first-stage setpoint actuation (covers estimation and
    /// the stage-1 solve).
    pub estimation_delay: f64,
    /// Per subsequent stage: solve time after the upstream targets arrive.
    pub stage_solve_delay: f64,
    /// Inter-area channel latency.
    pub inter_area_latency: f64,
    /// Voltage pipeline: primary actuation to secondary actuation.
    pub volt_secondary_delay: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        DelayConfig {
            primary_delay: 0.5,
            estimation_delay: 20.0,
            stage_solve_delay: 9.75,
            inter_area_latency: 0.25,
            volt_secondary_delay: 0.5,
        }
    }
}

/// Fully scheduled response to one contingency.
#[derive(Debug, Clone, Default)]
pub struct Timeline {
    pub commands: Vec<SimEvent>,
    pub messages: Vec<Message>,
    pub stages: Vec<StageResult>,
    pub primaries: Vec<PrimaryDispatch>,
    pub volt: Option<VoltOutcomeSummary>,
    pub classes: Option<IbrClassPartition>,
}

/// The pieces of a voltage outcome the coordinator layer records.
#[derive(Debug, Clone)]
pub struct VoltOutcomeSummary {
    pub steps: Vec<crate::volt::VoltStep>,
    pub sg_engaged: bool,
    pub relaxed_buses: Vec<usize>,
    pub objective: f64,
}

fn seq_counter(messages: &[Message], src: usize, dst: usize) -> u64 {
    messages
        .iter()
        .filter(|m| m.source == src && m.destination == dst)
        .count() as u64
}

fn push_message(
    messages: &mut Vec<Message>,
    kind: MessageKind,
    src: usize,
    dst: usize,
    send_time: f64,
    latency: f64,
) {
    let sequence = seq_counter(messages, src, dst);
    messages.push(Message {
        kind,
        source: src,
        destination: dst,
        send_time,
        delivery_time: send_time + latency,
        sequence,
    });
}

/// Computes the full frequency-control cascade for a detected active
/// imbalance: level-1 primary at `onset + primary_delay`, neighbor
/// primaries one primary delay later, stage-k setpoints at the estimation
/// and per-stage solve delays.
pub fn orchestrate_frequency(
    network: &Network,
    partition: &HierarchyPartition,
    x_star: &PowerFlowSolution,
    inputs: &ContingencyInputs,
    onset: f64,
    delays: &DelayConfig,
    appf: &AppfOptions,
) -> Result<Timeline, AppfError> {
    let mut tl = Timeline::default();
    let contingent = partition.contingent_area;

    // Headroom bulletins: neighbors keep the contingent coordinator's
    // picture of available capacity current.
    for area in network.areas.iter().filter(|a| a.id != contingent) {
        let total: f64 = network
            .ibr_units
            .iter()
            .filter(|u| area.bus_ids.contains(&u.bus_id))
            .map(|u| compute_headroom(u, HeadroomMode::Active))
            .sum();
        push_message(
            &mut tl.messages,
            MessageKind::HeadroomUpdate { total },
            area.id,
            contingent,
            onset,
            delays.inter_area_latency,
        );
    }

    let pinned = inputs.pinned_ibr.keys().copied().collect::<BTreeSet<_>>();
    let primaries = primary_dispatch_chain(network, partition, inputs.dp_load, &|bus| {
        !pinned.contains(&bus)
    });

    // Primary actuation: contingent level first, the higher levels one
    // primary delay later (the deficit request travels in that window).
    for p in &primaries {
        let t = onset + delays.primary_delay * (p.hierarchy_level as f64 + 1.0);
        let commands: Vec<DispatchCommand> = p
            .setpoints
            .iter()
            .filter(|(_, _, inc)| inc.abs() > 0.0)
            .map(|&(bus_id, p_new, _)| DispatchCommand {
                bus_id,
                p_ref: Some(p_new),
                q_ref: None,
            })
            .collect();
        if !commands.is_empty() {
            tl.commands.push(SimEvent {
                time: t,
                payload: EventPayload::SetpointArrival { commands },
            });
        }
        if p.hierarchy_level == 0 && p.residual_deficit > 0.0 {
            for area in &partition.levels[1.min(partition.levels.len() - 1)] {
                if *area == contingent {
                    continue;
                }
                push_message(
                    &mut tl.messages,
                    MessageKind::DeficitRequest {
                        dp_req: p.residual_deficit,
                    },
                    contingent,
                    *area,
                    onset + delays.primary_delay,
                    delays.inter_area_latency,
                );
            }
        }
    }

    // Secondary stages.
    let stages = run_appf(network, partition, x_star, inputs, &primaries, appf)?;
    for stage in &stages {
        let t = onset
            + delays.estimation_delay
            + stage.level as f64 * (delays.inter_area_latency + delays.stage_solve_delay);
        let commands: Vec<DispatchCommand> = stage
            .ibr_setpoints
            .iter()
            .map(|&(bus_id, p, q)| DispatchCommand {
                bus_id,
                p_ref: Some(p),
                q_ref: Some(q),
            })
            .collect();
        if !commands.is_empty() {
            tl.commands.push(SimEvent {
                time: t,
                payload: EventPayload::SetpointArrival { commands },
            });
        }
        // Tie targets hand the boundary conditions to the next level; a
        // self-sufficient stage keeps them to itself.
        let next_level_engaged = primaries
            .get(stage.level)
            .map(|p| p.residual_deficit > 0.0)
            .unwrap_or(false);
        if !stage.tie_targets_up.is_empty()
            && stage.level + 1 < partition.levels.len()
            && next_level_engaged
        {
            for area in &partition.levels[stage.level + 1] {
                push_message(
                    &mut tl.messages,
                    MessageKind::TieTargets {
                        lines: stage.tie_targets_up.clone(),
                    },
                    contingent,
                    *area,
                    t,
                    delays.inter_area_latency,
                );
            }
        }
    }

    tl.primaries = primaries;
    tl.stages = stages;
    Ok(tl)
}

/// Computes the voltage-control cascade: ranked class-1 reactive headroom
/// at `onset + primary_delay`, the sequential optimization's setpoints one
/// secondary delay later.
#[allow(clippy::too_many_arguments)]
pub fn orchestrate_voltage(
    network: &Network,
    x_star: &PowerFlowSolution,
    slack_bus_id: usize,
    contingent_bus: usize,
    dq_l: f64,
    load_overrides: &BTreeMap<usize, (f64, f64)>,
    onset: f64,
    delays: &DelayConfig,
    bounds: &VoltageBounds,
    stage_opts: &crate::optimizer::StageOptions,
) -> Result<Timeline, AppfError> {
    let mut tl = Timeline::default();

    let sens = compute_sensitivity(network, x_star, slack_bus_id)
        .map_err(|e| AppfError::Stage(crate::error::StageError::BadSpec(e.to_string())))?;
    let ibr_info: Vec<(usize, usize, f64)> = network
        .ibr_units
        .iter()
        .map(|u| {
            (
                u.bus_id,
                network.bus_index(u.bus_id).unwrap(),
                compute_headroom(u, HeadroomMode::Reactive),
            )
        })
        .collect();
    let contingent_idx = network.bus_index(contingent_bus).unwrap_or(0);
    let classes = rank_and_classify(&sens, contingent_idx, dq_l, &ibr_info);

    let q_info: BTreeMap<usize, (f64, f64)> = network
        .ibr_units
        .iter()
        .map(|u| {
            (
                u.bus_id,
                (u.q_set, compute_headroom(u, HeadroomMode::Reactive)),
            )
        })
        .collect();
    let reactive = primary_reactive_dispatch(&classes, dq_l, &q_info);
    let commands: Vec<DispatchCommand> = reactive
        .setpoints
        .iter()
        .filter(|(_, _, inc)| inc.abs() > 0.0)
        .map(|&(bus_id, q_new, _)| DispatchCommand {
            bus_id,
            p_ref: None,
            q_ref: Some(q_new),
        })
        .collect();
    if !commands.is_empty() {
        tl.commands.push(SimEvent {
            time: onset + delays.primary_delay,
            payload: EventPayload::SetpointArrival { commands },
        });
    }

    // Secondary: the sequential relaxation ladder.
    let q_targets: BTreeMap<usize, f64> =
        reactive.setpoints.iter().map(|&(b, q, _)| (b, q)).collect();
    let outcome = sequential_voltage_optimization(
        network,
        x_star,
        &classes,
        bounds,
        load_overrides,
        &q_targets,
        stage_opts,
    )
    .map_err(AppfError::Stage)?;

    let t2 = onset + delays.primary_delay + delays.volt_secondary_delay;
    let sec_commands: Vec<DispatchCommand> = outcome
        .ibr_setpoints
        .iter()
        .map(|&(bus_id, p, q)| DispatchCommand {
            bus_id,
            p_ref: Some(p),
            q_ref: Some(q),
        })
        .collect();
    if !sec_commands.is_empty() {
        tl.commands.push(SimEvent {
            time: t2,
            payload: EventPayload::SetpointArrival {
                commands: sec_commands,
            },
        });
    }
    for &(bus_id, v_ref) in &outcome.sg_avr_setpoints {
        tl.commands.push(SimEvent {
            time: t2,
            payload: EventPayload::AvrSetpoint { bus_id, v_ref },
        });
    }

    tl.volt = Some(summary_of(&outcome));
    tl.classes = Some(classes);
    Ok(tl)
}

fn summary_of(o: &VoltOutcome) -> VoltOutcomeSummary {
    VoltOutcomeSummary {
        steps: o.steps.clone(),
        sg_engaged: o.sg_engaged,
        relaxed_buses: o.relaxed_buses.clone(),
        objective: o.objective,
    }
}

/// Simultaneous active and reactive imbalance: voltage control claims the
/// ranked class-1 IBRs first, frequency control runs over class 2, and the
/// class-2 IBRs also carry the reactive adjustment for the new losses.
#[allow(clippy::too_many_arguments)]
pub fn orchestrate_simultaneous(
    network: &Network,
    partition: &HierarchyPartition,
    x_star: &PowerFlowSolution,
    slack_bus_id: usize,
    contingent_bus: usize,
    dq_l: f64,
    inputs: &ContingencyInputs,
    onset: f64,
    delays: &DelayConfig,
    bounds: &VoltageBounds,
    appf: &AppfOptions,
) -> Result<Timeline, AppfError> {
    // Voltage side first: class-1 reactive primary plus the relaxation
    // ladder, both scheduled on the voltage timeline.
    let volt_tl = orchestrate_voltage(
        network,
        x_star,
        slack_bus_id,
        contingent_bus,
        dq_l,
        &inputs.load_overrides,
        onset,
        delays,
        bounds,
        &appf.stage,
    )?;
    let classes = volt_tl.classes.clone().unwrap_or(IbrClassPartition {
        ranking: vec![],
        class1: vec![],
        class2: vec![],
    });

    // Voltage commands are re-filtered: class-2 active setpoints belong to
    // the frequency pipeline, so the secondary voltage actuation carries
    // class-1 injections and SG voltage targets only.
    let mut tl = Timeline::default();
    let class1: BTreeSet<usize> = classes.class1.iter().copied().collect();
    let mut class1_final: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for ev in &volt_tl.commands {
        match &ev.payload {
            EventPayload::SetpointArrival { commands } => {
                let kept: Vec<DispatchCommand> = commands
                    .iter()
                    .filter(|c| class1.contains(&c.bus_id))
                    .cloned()
                    .collect();
                for c in &kept {
                    let e = class1_final.entry(c.bus_id).or_insert((
                        network.ibr_at(c.bus_id).map(|u| u.p_set).unwrap_or(0.0),
                        network.ibr_at(c.bus_id).map(|u| u.q_set).unwrap_or(0.0),
                    ));
                    if let Some(p) = c.p_ref {
                        e.0 = p;
                    }
                    if let Some(q) = c.q_ref {
                        e.1 = q;
                    }
                }
                if !kept.is_empty() {
                    tl.commands.push(SimEvent {
                        time: ev.time,
                        payload: EventPayload::SetpointArrival { commands: kept },
                    });
                }
            }
            EventPayload::AvrSetpoint { .. } => tl.commands.push(ev.clone()),
            _ => {}
        }
    }
    tl.volt = volt_tl.volt;

    // Frequency side over class 2, with class 1 held at its final voltage
    // dispatch.
    let mut freq_inputs = inputs.clone();
    for (&bus, &(p, q)) in &class1_final {
        freq_inputs.pinned_ibr.insert(bus, (p, q));
    }
    let freq_tl = orchestrate_frequency(
        network,
        partition,
        x_star,
        &freq_inputs,
        onset,
        delays,
        appf,
    )?;
    tl.commands.extend(freq_tl.commands);
    tl.messages = freq_tl.messages;
    tl.primaries = freq_tl.primaries;
    tl.stages = freq_tl.stages;
    tl.classes = Some(classes);
    tl.commands
        .sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
    Ok(tl)
}

/// What the coordinator layer is allowed to do in a given run.
#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineControls {
    pub freq_appf: bool,
    pub volt_appf: bool,
}

/// One scheduled disturbance the (perfect) area state estimator can
/// quantify after its detection delay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduledContingency {
    pub time: f64,
    pub bus_id: usize,
    pub dp: f64,
    pub dq: f64,
    pub tripped_sg: Option<usize>,
}

/// Observer plugged into the simulator loop: detectors, the coordinator
/// state machines, and the orchestration glue.
pub struct CoordinatorSet {
    pub coordinators: BTreeMap<usize, Coordinator>,
    pub delays: DelayConfig,
    pub controls: PipelineControls,
    pub bounds: VoltageBounds,
    pub appf: AppfOptions,
    network: Network,
    x_star: PowerFlowSolution,
    slack_bus_id: usize,
    oracle: Vec<ScheduledContingency>,
    active_det: ActiveImbalanceDetector,
    volt_det: VoltageBandDetector,
    freq_hit: Option<(f64, usize)>,
    volt_hit: Option<(f64, usize)>,
    dispatched: bool,
    /// Oracle entries at or before this time are folded into the dispatched
    /// response; later ones are overlapping contingencies.
    covered_until: f64,
    pub fallback: bool,
    pub timeline: Option<Timeline>,
    pub message_trace: Vec<Message>,
}

impl CoordinatorSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        network: Network,
        x_star: PowerFlowSolution,
        slack_bus_id: usize,
        oracle: Vec<ScheduledContingency>,
        controls: PipelineControls,
        delays: DelayConfig,
        bounds: VoltageBounds,
        appf: AppfOptions,
        baseline_tie: BTreeMap<usize, f64>,
        baseline_gen: BTreeMap<usize, f64>,
    ) -> Self {
        let coordinators = network
            .areas
            .iter()
            .map(|a| (a.id, Coordinator::new(a.id)))
            .collect();
        let baseline_vm: Vec<f64> = x_star.bus_state.iter().map(|b| b.vm).collect();
        CoordinatorSet {
            coordinators,
            delays,
            controls,
            appf,
            active_det: ActiveImbalanceDetector::new(0.01, 6, baseline_tie, baseline_gen),
            volt_det: VoltageBandDetector::new(baseline_vm, bounds, 6),
            bounds,
            network,
            x_star,
            slack_bus_id,
            oracle,
            freq_hit: None,
            volt_hit: None,
            dispatched: false,
            covered_until: f64::NEG_INFINITY,
            fallback: false,
            timeline: None,
            message_trace: Vec::new(),
        }
    }

    /// Contingency facts supplied by the area state estimator (perfect in
    /// simulation: read from the scheduled events up to this time).
    fn estimator(&self, now: f64) -> (ContingencyInputs, Option<(usize, f64)>, f64) {
        let mut inputs = ContingencyInputs::default();
        let mut volt_bus = None;
        let mut dq_total = 0.0;
        let mut onset = f64::INFINITY;
        for c in self.oracle.iter().filter(|c| c.time <= now + 1e-9) {
            onset = onset.min(c.time);
            let e = inputs.load_overrides.entry(c.bus_id).or_insert((0.0, 0.0));
            e.0 += c.dp;
            e.1 += c.dq;
            inputs.dp_load += c.dp;
            if let Some(sg_bus) = c.tripped_sg {
                inputs.tripped_sg.insert(sg_bus);
            }
            if c.dq.abs() > 1e-9 {
                volt_bus = Some((c.bus_id, c.dq));
                dq_total += c.dq;
            }
        }
        let _ = onset;
        (inputs, volt_bus, dq_total)
    }

    pub fn observe(&mut self, frame: &Frame, inject: &mut Vec<SimEvent>) {
        for c in self.coordinators.values_mut() {
            if !c.note_frame(frame.time) {
                return;
            }
            c.advance(frame.time);
        }

        // A later disturbance overlapping the in-flight response cannot be
        // served by a second staged dispatch; the conventional secondary
        // control absorbs it.
        if self.dispatched
            && !self.fallback
            && self
                .oracle
                .iter()
                .any(|c| c.time > self.covered_until + 1e-9 && frame.time >= c.time)
        {
            self.trigger_fallback();
            return;
        }

        // Detection streams stay armed until an event is in flight; the
        // transients of a detected event are not a fresh contingency.
        if self.freq_hit.is_none() && !self.dispatched {
            let verdict = self
                .active_det
                .ingest(frame.time, &frame.area_tie_in, &frame.area_generation);
            match verdict {
                DetectorVerdict::Detected(r) => {
                    self.freq_hit = Some((r.onset_time, r.contingent_area));
                    if let Some(c) = self.coordinators.get_mut(&r.contingent_area) {
                        let _ = c.apply(CoordEvent::Detect);
                    }
                }
                DetectorVerdict::MultiContingency(_) => {
                    self.trigger_fallback();
                    return;
                }
                DetectorVerdict::Quiet => {}
            }
        }
        if self.volt_hit.is_none() && !self.dispatched {
            if let Some(v) = self.volt_det.ingest(frame.time, &frame.bus_vm) {
                let bus_id = self.network.buses[v.bus_index].id;
                let area = self.network.bus(bus_id).map(|b| b.area_id).unwrap_or(0);
                self.volt_hit = Some((v.onset_time, bus_id));
                if let Some(c) = self.coordinators.get_mut(&area) {
                    let _ = c.apply(CoordEvent::Detect);
                }
            }
        }

        if self.dispatched || self.fallback {
            return;
        }
        if self.freq_hit.is_none() && self.volt_hit.is_none() {
            return;
        }

        let (inputs, volt_bus, dq_total) = self.estimator(frame.time);
        let want_freq =
            self.controls.freq_appf && self.freq_hit.is_some() && inputs.dp_load.abs() > 1e-9;
        let want_volt = self.controls.volt_appf && self.volt_hit.is_some() && dq_total.abs() > 1e-9;

        // The response is timed from the onset seen by the pipeline that
        // will actually run; a detector tripped by cross-coupling noise
        // does not shift the schedule.
        let onset = match (
            want_freq.then_some(self.freq_hit).flatten(),
            want_volt.then_some(self.volt_hit).flatten(),
        ) {
            (Some((tf, _)), Some((tv, _))) => tf.min(tv),
            (Some((t, _)), None) | (None, Some((t, _))) => t,
            (None, None) => {
                self.dispatched = true;
                return;
            }
        };
        // Give the companion detector one combining window before deciding
        // which pipeline runs.
        if frame.time < onset + 0.2 {
            return;
        }

        let timeline = if want_freq && want_volt {
            let (bus, _) = volt_bus.unwrap();
            let area = self
                .freq_hit
                .map(|(_, a)| a)
                .unwrap_or_else(|| self.network.bus(bus).map(|b| b.area_id).unwrap_or(0));
            let partition = match assign_hierarchies(&self.network, area) {
                Ok(p) => p,
                Err(_) => return,
            };
            orchestrate_simultaneous(
                &self.network,
                &partition,
                &self.x_star,
                self.slack_bus_id,
                bus,
                dq_total,
                &inputs,
                onset,
                &self.delays,
                &self.bounds,
                &self.appf,
            )
        } else if want_freq {
            let area = self.freq_hit.unwrap().1;
            let partition = match assign_hierarchies(&self.network, area) {
                Ok(p) => p,
                Err(_) => return,
            };
            orchestrate_frequency(
                &self.network,
                &partition,
                &self.x_star,
                &inputs,
                onset,
                &self.delays,
                &self.appf,
            )
        } else if want_volt {
            let (bus, _) = volt_bus.unwrap();
            orchestrate_voltage(
                &self.network,
                &self.x_star,
                self.slack_bus_id,
                bus,
                dq_total,
                &inputs.load_overrides,
                onset,
                &self.delays,
                &self.bounds,
                &self.appf.stage,
            )
        } else {
            self.dispatched = true;
            self.covered_until = frame.time;
            return;
        };

        match timeline {
            Ok(tl) => {
                for ev in &tl.commands {
                    inject.push(ev.clone());
                }
                self.message_trace.extend(tl.messages.iter().cloned());
                self.schedule_phases(&tl, onset);
                self.timeline = Some(tl);
                self.dispatched = true;
                self.covered_until = frame.time;
            }
            Err(_) => {
                // Stage infeasible: the staged response is abandoned and
                // AGC keeps running in the backdrop.
                self.trigger_fallback();
            }
        }
    }

    fn schedule_phases(&mut self, tl: &Timeline, onset: f64) {
        let contingent = self
            .freq_hit
            .map(|(_, a)| a)
            .or_else(|| {
                self.volt_hit.and_then(|(_, bus)| {
                    self.network.bus(bus).map(|b| b.area_id)
                })
            })
            .unwrap_or(0);
        let d = &self.delays;
        let deficit = tl
            .primaries
            .first()
            .map(|p| p.residual_deficit > 0.0)
            .unwrap_or(false);
        let t_primary = onset + d.primary_delay;
        let t_stage1 = onset + d.estimation_delay;
        let t_stage2 = t_stage1 + d.inter_area_latency + d.stage_solve_delay;
        if let Some(c) = self.coordinators.get_mut(&contingent) {
            c.schedule(t_primary, CoordEvent::PrimaryApplied);
            c.schedule(t_primary + 1e-6, CoordEvent::StartStage);
            if deficit {
                c.schedule(t_stage1, CoordEvent::DeficitPending);
                c.schedule(t_stage2, CoordEvent::UpstreamComplete);
            } else {
                c.schedule(t_stage1, CoordEvent::StageComplete);
            }
        }
        if deficit {
            for (id, c) in self.coordinators.iter_mut() {
                if *id == contingent {
                    continue;
                }
                c.schedule(t_primary + d.inter_area_latency, CoordEvent::Detect);
                c.schedule(onset + 2.0 * d.primary_delay, CoordEvent::PrimaryApplied);
                c.schedule(
                    t_stage1 + d.inter_area_latency,
                    CoordEvent::StartStage,
                );
                c.schedule(t_stage2, CoordEvent::StageComplete);
            }
        }
    }

    fn trigger_fallback(&mut self) {
        if self.fallback {
            return;
        }
        self.fallback = true;
        for c in self.coordinators.values_mut() {
            // Idle coordinators have no staged response to abandon; the
            // transition is only legal from an in-flight phase.
            let _ = c.apply(CoordEvent::Overlap);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_transitions_legal_paths() {
        let mut c = Coordinator::new(1);
        assert!(c.apply(CoordEvent::Detect).is_ok());
        assert!(c.apply(CoordEvent::PrimaryApplied).is_ok());
        assert!(c.apply(CoordEvent::StartStage).is_ok());
        assert!(c.apply(CoordEvent::DeficitPending).is_ok());
        assert!(c.apply(CoordEvent::UpstreamComplete).is_ok());
        assert_eq!(c.phase, Phase::Complete);
        assert!(c.apply(CoordEvent::Reset).is_ok());
        assert_eq!(c.phase, Phase::Idle);
    }

    #[test]
    fn phase_rejects_illegal_moves() {
        let mut c = Coordinator::new(1);
        assert!(c.apply(CoordEvent::StageComplete).is_err());
        assert!(c.apply(CoordEvent::Detect).is_ok());
        assert!(c.apply(CoordEvent::StartStage).is_err());
        // Overlap from any in-flight phase lands in the AGC fallback.
        assert!(c.apply(CoordEvent::Overlap).is_ok());
        assert_eq!(c.phase, Phase::FallbackAgc);
        assert!(c.apply(CoordEvent::Detect).is_err());
    }

    #[test]
    fn messages_keep_channel_fifo_order() {
        let mut messages = Vec::new();
        for i in 0..4 {
            push_message(
                &mut messages,
                MessageKind::HeadroomUpdate { total: i as f64 },
                2,
                1,
                10.0,
                0.25,
            );
        }
        for (i, m) in messages.iter().enumerate() {
            assert_eq!(m.sequence, i as u64);
            assert!(m.delivery_time >= m.send_time);
        }
    }

    #[test]
    fn message_schema_carries_no_interior_state() {
        // The wire format names only deficits, tie targets, headroom sums
        // and device commands.
        let samples = vec![
            MessageKind::DeficitRequest { dp_req: 0.4 },
            MessageKind::TieTargets {
                lines: vec![(0, 0.3, 0.05)],
            },
            MessageKind::HeadroomUpdate { total: 0.8 },
            MessageKind::SetpointCommand { commands: vec![] },
        ];
        for kind in samples {
            let json = serde_json::to_string(&kind).unwrap();
            for forbidden in ["vm", "va", "voltage", "angle", "bus_state"] {
                assert!(
                    !json.contains(forbidden),
                    "message leaks interior state: {json}"
                );
            }
        }
    }
}
