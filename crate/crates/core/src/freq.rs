//! Frequency-control pipeline: active-imbalance detection, headroom-
//! proportional primary dispatch across hierarchy levels, and the
//! sequential stage optimization that produces the secondary setpoints.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{AppfError, StageError};
use crate::grid::{
    build_scoped_admittance, compute_headroom, HeadroomMode, HierarchyPartition, Network,
};
use crate::optimizer::{
    solve_constrained_stage, Bound, ObjectiveTerm, QuantityBounds, StageOptions, StageSolveReport,
    StageSpec, VarRef,
};
use crate::powerflow::{line_flow, BusVariables, MaskEntry, PowerFlowSolution, Quantity, VariableMask};

/// Weight on the squared residual regularization terms that pin otherwise
/// objective-flat directions (per-boundary tie splits, IBR reactive
/// splits). Three orders below the unit default of the main weights.
pub const REGULARIZATION_WEIGHT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContingencyKind {
    LoadChange,
    GenerationTrip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub contingent_area: usize,
    pub kind: ContingencyKind,
    /// Signed estimate; positive = load increase / lost generation.
    pub magnitude: f64,
    pub detection_time: f64,
    /// Time of the first sample that left the baseline.
    pub onset_time: f64,
    pub per_area_tie_delta: BTreeMap<usize, f64>,
    pub per_area_gen_delta: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone)]
pub enum DetectorVerdict {
    Quiet,
    Detected(ImbalanceReport),
    /// More than one area tripped the test in the same window; handled by
    /// falling back to AGC rather than starting a second staged dispatch.
    MultiContingency(Vec<usize>),
}

/// Streaming detector over per-area tie-flow and generation sums.
#[derive(Debug, Clone)]
pub struct ActiveImbalanceDetector {
    pub epsilon: f64,
    pub debounce_samples: usize,
    baseline_tie: BTreeMap<usize, f64>,
    baseline_gen: BTreeMap<usize, f64>,
    streak: BTreeMap<usize, usize>,
    onset: BTreeMap<usize, f64>,
}

impl ActiveImbalanceDetector {
    pub fn new(
        epsilon: f64,
        debounce_samples: usize,
        baseline_tie: BTreeMap<usize, f64>,
        baseline_gen: BTreeMap<usize, f64>,
    ) -> Self {
        ActiveImbalanceDetector {
            epsilon,
            debounce_samples,
            baseline_tie,
            baseline_gen,
            streak: BTreeMap::new(),
            onset: BTreeMap::new(),
        }
    }

    /// Feeds one synchronized sample of per-area total incoming tie flow
    /// and total generation.
    pub fn ingest(
        &mut self,
        time: f64,
        tie_sums: &BTreeMap<usize, f64>,
        gen_sums: &BTreeMap<usize, f64>,
    ) -> DetectorVerdict {
        let mut flagged = Vec::new();
        for (&area, &tie) in tie_sums {
            let d_tie = tie - self.baseline_tie.get(&area).copied().unwrap_or(0.0);
            let d_gen = gen_sums.get(&area).copied().unwrap_or(0.0)
                - self.baseline_gen.get(&area).copied().unwrap_or(0.0);
            // Generator trips show directly in the generation stream; load
            // changes show as |sum dP_tie| != |sum dP_gen|.
            let trip = d_gen < -self.epsilon;
            let load = (d_tie.abs() - d_gen.abs()).abs() > self.epsilon;
            if trip || load {
                let s = self.streak.entry(area).or_insert(0);
                if *s == 0 {
                    self.onset.insert(area, time);
                }
                *s += 1;
                if *s >= self.debounce_samples {
                    flagged.push((area, d_tie, d_gen, trip));
                }
            } else {
                self.streak.insert(area, 0);
                self.onset.remove(&area);
            }
        }

        match flagged.len() {
            0 => DetectorVerdict::Quiet,
            1 => {
                let (area, d_tie, d_gen, trip) = flagged[0];
                let per_area_tie_delta: BTreeMap<usize, f64> = tie_sums
                    .iter()
                    .map(|(&a, &v)| (a, v - self.baseline_tie.get(&a).copied().unwrap_or(0.0)))
                    .collect();
                let per_area_gen_delta: BTreeMap<usize, f64> = gen_sums
                    .iter()
                    .map(|(&a, &v)| (a, v - self.baseline_gen.get(&a).copied().unwrap_or(0.0)))
                    .collect();
                let (kind, magnitude) = if trip {
                    (ContingencyKind::GenerationTrip, -d_gen)
                } else {
                    (ContingencyKind::LoadChange, d_tie)
                };
                DetectorVerdict::Detected(ImbalanceReport {
                    contingent_area: area,
                    kind,
                    magnitude,
                    detection_time: time,
                    onset_time: self.onset.get(&area).copied().unwrap_or(time),
                    per_area_tie_delta,
                    per_area_gen_delta,
                })
            }
            _ => DetectorVerdict::MultiContingency(
                flagged.into_iter().map(|(a, ..)| a).collect(),
            ),
        }
    }
}

/// Primary-control result for one hierarchy level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimaryDispatch {
    /// Per-IBR `(bus_id, new setpoint, increment)`.
    pub setpoints: Vec<(usize, f64, f64)>,
    /// Power still required from the next level; zero when self-sufficient.
    pub residual_deficit: f64,
    pub hierarchy_level: usize,
}

impl PrimaryDispatch {
    pub fn total_increment(&self) -> f64 {
        self.setpoints.iter().map(|(_, _, inc)| inc).sum()
    }
}

/// Headroom-proportional split of a load change over the contingent
/// hierarchy's IBRs; saturates everyone and reports the deficit when the
/// level cannot cover it.
pub fn primary_dispatch_first_hierarchy(
    dp_load: f64,
    ibrs: &[(usize, f64, f64)], // (bus_id, p_set, headroom)
) -> PrimaryDispatch {
    let total_h: f64 = ibrs.iter().map(|(_, _, h)| h).sum();
    if ibrs.is_empty() || total_h <= 0.0 {
        return PrimaryDispatch {
            setpoints: ibrs.iter().map(|&(id, p, _)| (id, p, 0.0)).collect(),
            residual_deficit: dp_load.max(0.0),
            hierarchy_level: 0,
        };
    }
    if dp_load <= 0.0 {
        return PrimaryDispatch {
            setpoints: ibrs.iter().map(|&(id, p, _)| (id, p, 0.0)).collect(),
            residual_deficit: 0.0,
            hierarchy_level: 0,
        };
    }
    if dp_load <= total_h {
        let setpoints = ibrs
            .iter()
            .map(|&(id, p, h)| {
                let inc = h / total_h * dp_load;
                (id, p + inc, inc)
            })
            .collect();
        PrimaryDispatch {
            setpoints,
            residual_deficit: 0.0,
            hierarchy_level: 0,
        }
    } else {
        let setpoints = ibrs.iter().map(|&(id, p, h)| (id, p + h, h)).collect();
        PrimaryDispatch {
            setpoints,
            residual_deficit: dp_load - total_h,
            hierarchy_level: 0,
        }
    }
}

/// Deficit split over a higher hierarchy level: area shares proportional
/// to per-area headroom sums, per-IBR splits proportional within the area.
pub fn primary_dispatch_higher_hierarchy(
    dp_req: f64,
    level: usize,
    areas: &[(usize, Vec<(usize, f64, f64)>)], // (area_id, [(bus_id, p_set, headroom)])
) -> PrimaryDispatch {
    let total_h: f64 = areas
        .iter()
        .flat_map(|(_, ibrs)| ibrs.iter().map(|(_, _, h)| h))
        .sum();
    let all = || -> Vec<(usize, f64, f64)> {
        areas
            .iter()
            .flat_map(|(_, ibrs)| ibrs.iter().map(|&(id, p, _)| (id, p, 0.0)))
            .collect()
    };
    if total_h <= 0.0 {
        return PrimaryDispatch {
            setpoints: all(),
            residual_deficit: dp_req.max(0.0),
            hierarchy_level: level,
        };
    }
    if dp_req <= 0.0 {
        return PrimaryDispatch {
            setpoints: all(),
            residual_deficit: 0.0,
            hierarchy_level: level,
        };
    }
    if dp_req <= total_h {
        let mut setpoints = Vec::new();
        for (_, ibrs) in areas {
            let area_h: f64 = ibrs.iter().map(|(_, _, h)| h).sum();
            let area_share = area_h / total_h * dp_req;
            for &(id, p, h) in ibrs {
                // Proportional split inside the area, capped at headroom.
                let inc = if area_h > 0.0 {
                    (h / area_h * area_share).min(h)
                } else {
                    0.0
                };
                setpoints.push((id, p + inc, inc));
            }
        }
        PrimaryDispatch {
            setpoints,
            residual_deficit: 0.0,
            hierarchy_level: level,
        }
    } else {
        let setpoints = areas
            .iter()
            .flat_map(|(_, ibrs)| ibrs.iter().map(|&(id, p, h)| (id, p + h, h)))
            .collect();
        PrimaryDispatch {
            setpoints,
            residual_deficit: dp_req - total_h,
            hierarchy_level: level,
        }
    }
}

/// Primary dispatch for every participating hierarchy level. The chain
/// terminates at the first self-sufficient level.
pub fn primary_dispatch_chain(
    network: &Network,
    partition: &HierarchyPartition,
    dp_load: f64,
    ibr_filter: &dyn Fn(usize) -> bool,
) -> Vec<PrimaryDispatch> {
    let mut out = Vec::new();
    let mut need = dp_load;
    for (level, areas) in partition.levels.iter().enumerate() {
        if level == 0 {
            let ibrs = level_ibrs(network, areas, ibr_filter);
            let d = primary_dispatch_first_hierarchy(need, &ibrs);
            need = d.residual_deficit;
            out.push(d);
        } else {
            let grouped: Vec<(usize, Vec<(usize, f64, f64)>)> = areas
                .iter()
                .map(|&a| {
                    let set = BTreeSet::from([a]);
                    (a, level_ibrs(network, &set, ibr_filter))
                })
                .collect();
            let d = primary_dispatch_higher_hierarchy(need, level, &grouped);
            need = d.residual_deficit;
            out.push(d);
        }
        if need <= 0.0 {
            break;
        }
    }
    out
}

fn level_ibrs(
    network: &Network,
    areas: &BTreeSet<usize>,
    ibr_filter: &dyn Fn(usize) -> bool,
) -> Vec<(usize, f64, f64)> {
    network
        .ibr_units
        .iter()
        .filter(|u| {
            ibr_filter(u.bus_id)
                && areas.contains(&network.bus(u.bus_id).map(|b| b.area_id).unwrap_or(usize::MAX))
        })
        .map(|u| (u.bus_id, u.p_set, compute_headroom(u, HeadroomMode::Active)))
        .collect()
}

/// Result of one optimization stage.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub level: usize,
    /// Global bus indices of the stage network, parallel to the solution.
    pub scope: Vec<usize>,
    pub solution: PowerFlowSolution,
    pub report_objective: f64,
    /// `(bus_id, p, q)` for every IBR dispatched by this stage.
    pub ibr_setpoints: Vec<(usize, f64, f64)>,
    /// Per tie line toward the next level: `(branch_idx, p, q)` measured as
    /// import into this level at its boundary bus.
    pub tie_targets_up: Vec<(usize, f64, f64)>,
    /// Per tie line toward the previous level (stages beyond the first):
    /// realized `(branch_idx, p, q)` delivered down.
    pub tie_targets_down: Vec<(usize, f64, f64)>,
}

/// Everything `solve_constrained_stage` needs for one level, plus the
/// bookkeeping to read tie flows back out.
#[derive(Debug, Clone)]
pub struct BuiltStage {
    pub level: usize,
    pub spec: StageSpec,
    /// Global bus indices (into `network.buses`) of the stage network.
    pub scope: Vec<usize>,
    /// Boundary buses of the previous level included with pinned
    /// injections.
    pub down_boundary: BTreeSet<usize>,
    /// Branch indices of the tie lines toward the next level.
    pub up_lines: Vec<usize>,
    /// `(local bus, pre-contingency import P, import Q, native P, native Q)`
    /// for each boundary bus toward the next level.
    pub up_boundary: Vec<(usize, f64, f64, f64, f64)>,
    /// IBR bus ids mapped to local indices.
    pub ibr_local: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub struct StageWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for StageWeights {
    fn default() -> Self {
        StageWeights { w1: 1.0, w2: 1.0 }
    }
}

fn bus_ids_of(scope: &[usize], network: &Network) -> Vec<usize> {
    scope.iter().map(|&g| network.buses[g].id).collect()
}

/// Builds the stage specification for hierarchy level `level` (0-based).
///
/// Masks follow the per-role chart: SG buses hold |V| and P; load and
/// transfer buses hold P and Q; IBR buses and boundary buses toward the
/// next level are voltage-anchored actuators with free injections;
/// boundary buses toward the previous level enter with P and Q pinned to
/// the negated tie targets of that stage.
#[allow(clippy::too_many_arguments)]
pub fn build_stage_spec(
    network: &Network,
    partition: &HierarchyPartition,
    level: usize,
    x_star: &PowerFlowSolution,
    primary_targets: &BTreeMap<usize, f64>,
    weights: StageWeights,
    inputs: &ContingencyInputs,
    prev: Option<&StageResult>,
) -> Result<BuiltStage, StageError> {
    let dp_load = inputs.dp_load;
    let load_overrides = &inputs.load_overrides;
    let pinned_ibr = &inputs.pinned_ibr;
    if level >= partition.levels.len() {
        return Err(StageError::BadSpec(format!(
            "level {level} beyond partition depth {}",
            partition.levels.len()
        )));
    }
    if level > 0 && prev.is_none() {
        return Err(StageError::MissingUpstream {
            level,
            missing: level - 1,
        });
    }

    let level_areas = &partition.levels[level];
    // Scope: the level's own buses, plus (for later stages) the previous
    // level's boundary buses so the connecting tie lines stay modeled.
    let mut scope_ids: BTreeSet<usize> = BTreeSet::new();
    for &a in level_areas {
        scope_ids.extend(network.area(a).map(|ar| ar.bus_ids.clone()).unwrap_or_default());
    }
    let down_key = (level.wrapping_sub(1), level);
    let down_boundary: BTreeSet<usize> = if level > 0 {
        partition
            .boundary_buses
            .get(&down_key)
            .cloned()
            .unwrap_or_default()
    } else {
        BTreeSet::new()
    };
    scope_ids.extend(down_boundary.iter().copied());

    let up_key = (level, level + 1);
    let up_lines: Vec<usize> = partition.tie_lines.get(&up_key).cloned().unwrap_or_default();
    // The next hierarchy is represented by the far endpoints of the up-tie
    // lines: voltage-anchored interface buses whose free injections are the
    // per-line tie flows, with the line drop modeled on the real branch.
    let near_side: BTreeSet<usize> = partition
        .boundary_buses
        .get(&up_key)
        .cloned()
        .unwrap_or_default();
    let mut far_side: BTreeSet<usize> = BTreeSet::new();
    for &l in &up_lines {
        let br = &network.branches[l];
        let far = if near_side.contains(&br.from_bus) {
            br.to_bus
        } else {
            br.from_bus
        };
        far_side.insert(far);
    }
    scope_ids.extend(far_side.iter().copied());

    let scope: Vec<usize> = scope_ids
        .iter()
        .map(|id| {
            network
                .bus_index(*id)
                .ok_or(StageError::BadSpec(format!("bus {id} missing")))
        })
        .collect::<Result<_, _>>()?;
    // Previous-stage tie targets by boundary bus (negated import).
    let mut down_injections: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    if let Some(prev) = prev {
        for &(branch_idx, p, q) in &prev.tie_targets_up {
            let br = &network.branches[branch_idx];
            // The boundary bus of the previous level is the endpoint inside
            // that level.
            let bus = if down_boundary.contains(&br.from_bus) {
                br.from_bus
            } else {
                br.to_bus
            };
            let e = down_injections.entry(bus).or_insert((0.0, 0.0));
            e.0 -= p;
            e.1 -= q;
        }
    }

    let mut entries = Vec::with_capacity(scope.len());
    let mut initial = Vec::with_capacity(scope.len());
    let mut bounds = Vec::with_capacity(scope.len());
    let mut bus_ids = Vec::with_capacity(scope.len());
    let mut objective = Vec::new();
    let mut ibr_local = Vec::new();
    let mut up_boundary = Vec::new();
    let mut mva_limits = Vec::new();

    for (li, &gi) in scope.iter().enumerate() {
        let bus = &network.buses[gi];
        bus_ids.push(bus.id);
        let xs = x_star.bus_state[gi];
        let mut b = QuantityBounds::FREE;
        b.vm = Bound::new(bus.v_min, bus.v_max);

        let is_down = down_boundary.contains(&bus.id);
        let is_up = far_side.contains(&bus.id);
        // Post-contingency injection anchored at the solved pre-contingency
        // operating point. A tripped machine loses its whole solved output,
        // leaving only the local demand at its bus.
        let (p_nat, q_nat) = if inputs.tripped_sg.contains(&bus.id) {
            let load = network.loads.get(&bus.id);
            (
                -load.map(|l| l.p).unwrap_or(0.0),
                -load.map(|l| l.q).unwrap_or(0.0),
            )
        } else {
            let (mut p, mut q) = (xs.p, xs.q);
            if let Some(&(dp, dq)) = load_overrides.get(&bus.id) {
                p -= dp;
                q -= dq;
            }
            (p, q)
        };

        if is_down {
            // Boundary toward the previous level: injection pinned to the
            // negated handed-down tie targets.
            let (p, q) = down_injections.get(&bus.id).copied().unwrap_or((0.0, 0.0));
            entries.push(MaskEntry::PQ);
            initial.push(BusVariables {
                vm: xs.vm,
                va: xs.va,
                p,
                q,
            });
        } else if is_up {
            // Interface bus of the next hierarchy: voltage-anchored
            // actuator whose free injection equals its export into the tie
            // lines (its own area's branches are outside the stage scope).
            entries.push(MaskEntry::VOLTAGE);
            // Pre-contingency export over its tie lines, measured at this
            // end of the real branches.
            let mut p_tie = 0.0;
            let mut q_tie = 0.0;
            let mut cap = 0.0;
            for &l in &up_lines {
                let br = &network.branches[l];
                if br.from_bus == bus.id || br.to_bus == bus.id {
                    let kf = network.bus_index(br.from_bus).unwrap();
                    let kt = network.bus_index(br.to_bus).unwrap();
                    let f = line_flow(
                        br,
                        x_star.bus_state[kf].voltage(),
                        x_star.bus_state[kt].voltage(),
                    );
                    let (p, q) = if br.from_bus == bus.id {
                        (f.p_from, f.q_from)
                    } else {
                        (f.p_to, f.q_to)
                    };
                    p_tie += p;
                    q_tie += q;
                    // Exports are bounded by the pre-contingency flow plus
                    // the contingency magnitude, capped at the thermal
                    // rating.
                    cap += (p + dp_load).min(br.thermal_rating_p);
                }
            }
            b.p = Bound::new(f64::NEG_INFINITY, cap);
            up_boundary.push((li, p_tie, q_tie, 0.0, 0.0));
            initial.push(BusVariables {
                vm: xs.vm,
                va: xs.va,
                p: p_tie,
                q: q_tie,
            });
            // Light regularization toward the pre-contingency per-bus tie
            // flow so the split across interface buses stays determined.
            objective.push(ObjectiveTerm::single(
                REGULARIZATION_WEIGHT,
                VarRef {
                    bus: li,
                    quantity: Quantity::P,
                },
                p_tie,
            ));
            objective.push(ObjectiveTerm::single(
                REGULARIZATION_WEIGHT,
                VarRef {
                    bus: li,
                    quantity: Quantity::Q,
                },
                q_tie,
            ));
        } else {
            match bus.kind {
                crate::grid::BusKind::Sg
                    if network.sg_at(bus.id).is_some()
                        && !inputs.tripped_sg.contains(&bus.id) =>
                {
                    let u = network.sg_at(bus.id).unwrap();
                    entries.push(MaskEntry::PV);
                    b.p = Bound::new(u.p_min, u.p_max);
                    b.q = Bound::new(u.q_min, u.q_max);
                    // P holds its solved pre-contingency value exactly.
                    initial.push(BusVariables {
                        vm: xs.vm,
                        va: xs.va,
                        p: p_nat,
                        q: xs.q,
                    });
                }
                crate::grid::BusKind::Ibr if network.ibr_at(bus.id).is_some() => {
                    let u = network.ibr_at(bus.id).unwrap();
                    if let Some(&(p, q)) = pinned_ibr.get(&bus.id) {
                        // Reserved by the simultaneous-control split: holds
                        // its externally assigned setpoint.
                        entries.push(MaskEntry::PQ);
                        initial.push(BusVariables {
                            vm: xs.vm,
                            va: xs.va,
                            p,
                            q,
                        });
                    } else {
                        entries.push(MaskEntry::VOLTAGE);
                        // The capability circle dominates a box cap at or
                        // beyond s_max; keeping both would make the active
                        // set degenerate where they touch.
                        let p_hi = if u.p_max < u.s_max { u.p_max } else { f64::INFINITY };
                        b.p = Bound::new(u.p_min, p_hi);
                        b.q = Bound::new(u.q_min, u.q_max);
                        mva_limits.push((li, u.s_max));
                        let target = primary_targets.get(&bus.id).copied().unwrap_or(u.p_set);
                        objective.push(ObjectiveTerm::single(
                            weights.w2,
                            VarRef {
                                bus: li,
                                quantity: Quantity::P,
                            },
                            target,
                        ));
                        // Reactive setpoints are dispatched alongside P;
                        // regularized toward the schedule.
                        objective.push(ObjectiveTerm::single(
                            REGULARIZATION_WEIGHT,
                            VarRef {
                                bus: li,
                                quantity: Quantity::Q,
                            },
                            u.q_set,
                        ));
                        ibr_local.push((bus.id, li));
                        initial.push(BusVariables {
                            vm: xs.vm,
                            va: xs.va,
                            p: xs.p,
                            q: xs.q,
                        });
                    }
                }
                _ => {
                    entries.push(MaskEntry::PQ);
                    initial.push(BusVariables {
                        vm: xs.vm,
                        va: xs.va,
                        p: p_nat,
                        q: q_nat,
                    });
                }
            }
        }
        bounds.push(b);
    }

    // Tie-sum deviation objective toward the next level.
    if !up_boundary.is_empty() {
        let p_target: f64 = up_boundary.iter().map(|&(_, p, _, pn, _)| p + pn).sum();
        let q_target: f64 = up_boundary.iter().map(|&(_, _, q, _, qn)| q + qn).sum();
        let p_coefs: Vec<(VarRef, f64)> = up_boundary
            .iter()
            .map(|&(li, ..)| {
                (
                    VarRef {
                        bus: li,
                        quantity: Quantity::P,
                    },
                    1.0,
                )
            })
            .collect();
        let q_coefs: Vec<(VarRef, f64)> = up_boundary
            .iter()
            .map(|&(li, ..)| {
                (
                    VarRef {
                        bus: li,
                        quantity: Quantity::Q,
                    },
                    1.0,
                )
            })
            .collect();
        objective.push(ObjectiveTerm {
            weight: weights.w1,
            coefficients: p_coefs,
            target: p_target,
        });
        objective.push(ObjectiveTerm {
            weight: weights.w1,
            coefficients: q_coefs,
            target: q_target,
        });
    }

    let spec = StageSpec {
        mask: VariableMask { entries },
        initial,
        objective,
        bounds,
        balance_scope: (0..scope.len())
            .filter(|&li| !far_side.contains(&bus_ids_of(&scope, network)[li]))
            .collect(),
        hard_reference: BTreeSet::new(),
        bus_ids,
        mva_limits,
    };

    // Down-tie lines keep both endpoints in scope and stay in the stage
    // admittance; up-tie lines have one endpoint outside and drop out.
    Ok(BuiltStage {
        level,
        spec,
        scope,
        down_boundary,
        up_lines,
        up_boundary,
        ibr_local,
    })
}

/// Options for the staged run.
#[derive(Debug, Clone)]
pub struct AppfOptions {
    pub weights: StageWeights,
    pub stage: StageOptions,
    /// One loss-refinement pass per stage: after the first solve the IBR
    /// targets absorb the measured network-loss change so the tie flows
    /// return to schedule.
    pub loss_refinement: bool,
}

impl Default for AppfOptions {
    fn default() -> Self {
        AppfOptions {
            weights: StageWeights::default(),
            stage: StageOptions::default(),
            loss_refinement: true,
        }
    }
}

/// Inputs describing the contingency for the staged solve.
#[derive(Debug, Clone, Default)]
pub struct ContingencyInputs {
    /// Additional demand per bus id (positive = load increase). A tripped
    /// generator appears as the loss of its scheduled injection.
    pub load_overrides: BTreeMap<usize, (f64, f64)>,
    /// Total active imbalance, p.u.
    pub dp_load: f64,
    /// IBRs excluded from this frequency run, pinned at the given (P, Q)
    /// (used when voltage control has reserved them).
    pub pinned_ibr: BTreeMap<usize, (f64, f64)>,
    /// SG buses whose machine is out of service; they enter stage networks
    /// as plain injection buses.
    pub tripped_sg: BTreeSet<usize>,
}

fn solve_stage_once(
    network: &Network,
    built: &BuiltStage,
    opts: &StageOptions,
) -> Result<StageSolveReport, StageError> {
    let y = build_scoped_admittance(network, &built.scope, |_, _| true)
        .map_err(|e| StageError::BadSpec(e.to_string()))?;
    solve_constrained_stage(&y, &built.spec, opts)
}

fn stage_result_from(
    network: &Network,
    built: &BuiltStage,
    report: StageSolveReport,
    prev: Option<&StageResult>,
) -> StageResult {
    let z = &report.solution.bus_state;
    let ibr_setpoints = built
        .ibr_local
        .iter()
        .map(|&(bus_id, li)| (bus_id, z[li].p, z[li].q))
        .collect();

    // Hand-up targets: per tie line, the realized import into this level
    // at its own boundary bus, read straight off the modeled branches.
    let mut tie_targets_up = Vec::new();
    for &l in &built.up_lines {
        let br = &network.branches[l];
        let fi = built.spec.bus_ids.iter().position(|&id| id == br.from_bus);
        let ti = built.spec.bus_ids.iter().position(|&id| id == br.to_bus);
        let (Some(fi), Some(ti)) = (fi, ti) else {
            continue;
        };
        let f = line_flow(br, z[fi].voltage(), z[ti].voltage());
        // The near end is the one inside this level's areas.
        let from_is_near = !built
            .up_boundary
            .iter()
            .any(|&(li, ..)| built.spec.bus_ids[li] == br.from_bus);
        let (p, q) = if from_is_near {
            (-f.p_from, -f.q_from)
        } else {
            (-f.p_to, -f.q_to)
        };
        tie_targets_up.push((l, p, q));
    }

    // Hand-down flows: realized flows on the tie lines to the previous
    // level, measured as import into that level's boundary bus.
    let mut tie_targets_down = Vec::new();
    if let Some(prev) = prev {
        for &(branch_idx, ..) in &prev.tie_targets_up {
            let br = &network.branches[branch_idx];
            // Both endpoints are in this stage's scope.
            let lf = built
                .spec
                .bus_ids
                .iter()
                .position(|&id| id == br.from_bus)
                .zip(built.spec.bus_ids.iter().position(|&id| id == br.to_bus));
            if let Some((fi, ti)) = lf {
                let f = line_flow(br, z[fi].voltage(), z[ti].voltage());
                // Import into the previous level's boundary bus.
                let down_bus_is_from = built.down_boundary.contains(&br.from_bus);
                let (p, q) = if down_bus_is_from {
                    (-f.p_from, -f.q_from)
                } else {
                    (-f.p_to, -f.q_to)
                };
                tie_targets_down.push((branch_idx, p, q));
            }
        }
    }

    StageResult {
        level: built.level,
        scope: built.scope.clone(),
        solution: report.solution,
        report_objective: report.objective_value,
        ibr_setpoints,
        tie_targets_up,
        tie_targets_down,
    }
}

/// Sequentially solves the hierarchy stages. The sequence stops at the
/// first level whose primary dispatch left no residual deficit; a stage
/// infeasibility aborts with the completed prefix attached.
pub fn run_appf(
    network: &Network,
    partition: &HierarchyPartition,
    x_star: &PowerFlowSolution,
    inputs: &ContingencyInputs,
    primaries: &[PrimaryDispatch],
    opts: &AppfOptions,
) -> Result<Vec<StageResult>, AppfError> {
    let mut results: Vec<StageResult> = Vec::new();
    let n_stages = primaries.len().max(1).min(partition.levels.len());

    for level in 0..n_stages {
        let mut targets: BTreeMap<usize, f64> = BTreeMap::new();
        if let Some(p) = primaries.get(level) {
            for &(bus, setpoint, _) in &p.setpoints {
                targets.insert(bus, setpoint);
            }
        }

        let prev = results.last();
        let built = build_stage_spec(
            network,
            partition,
            level,
            x_star,
            &targets,
            opts.weights,
            inputs,
            prev,
        )
        .map_err(|e| AppfError::StageInfeasible {
            level,
            partial: results.len(),
            source: e,
        })?;

        let mut report = solve_stage_once(network, &built, &opts.stage).map_err(|e| {
            AppfError::StageInfeasible {
                level,
                partial: results.len(),
                source: e,
            }
        })?;

        if opts.loss_refinement && !built.ibr_local.is_empty() {
            // Losses inside the stage scope pull the realized IBR outputs
            // off the primary targets and smear the difference into the tie
            // flows. Re-anchor the targets by the measured excess, split in
            // proportion to the remaining headroom, and re-solve; the fixed
            // point keeps the tie schedule intact. Convergence is geometric,
            // so a few passes reach the tolerance.
            let mut refined = targets.clone();
            for _ in 0..5 {
                let delta: f64 = built
                    .ibr_local
                    .iter()
                    .map(|&(bus_id, li)| {
                        let tgt = refined
                            .get(&bus_id)
                            .copied()
                            .unwrap_or(network.ibr_at(bus_id).map(|u| u.p_set).unwrap_or(0.0));
                        report.solution.bus_state[li].p - tgt
                    })
                    .sum();
                if delta.abs() <= 2e-7 {
                    break;
                }
                let headrooms: Vec<(usize, f64)> = built
                    .ibr_local
                    .iter()
                    .map(|&(bus_id, _)| {
                        let u = network.ibr_at(bus_id).unwrap();
                        let tgt = refined.get(&bus_id).copied().unwrap_or(u.p_set);
                        (bus_id, (u.p_max.min(u.s_max) - tgt).max(0.0))
                    })
                    .collect();
                let total_h: f64 = headrooms.iter().map(|(_, h)| h).sum();
                for (bus_id, h) in &headrooms {
                    let share = if total_h > 0.0 {
                        h / total_h
                    } else {
                        1.0 / headrooms.len() as f64
                    };
                    let u = network.ibr_at(*bus_id).unwrap();
                    let t = refined.get(bus_id).copied().unwrap_or(u.p_set) + share * delta;
                    refined.insert(*bus_id, t.clamp(u.p_min, u.p_max.min(u.s_max)));
                }
                let rebuilt = build_stage_spec(
                    network,
                    partition,
                    level,
                    x_star,
                    &refined,
                    opts.weights,
                    inputs,
                    prev,
                )
                .map_err(|e| AppfError::StageInfeasible {
                    level,
                    partial: results.len(),
                    source: e,
                })?;
                match solve_stage_once(network, &rebuilt, &opts.stage) {
                    Ok(second) => report = second,
                    Err(_) => break,
                }
            }
        }

        let result = stage_result_from(network, &built, report, prev);
        results.push(result);

        let residual = primaries.get(level).map(|p| p.residual_deficit).unwrap_or(0.0);
        if residual <= 0.0 {
            break;
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detector_flags_load_change() {
        let areas: BTreeMap<usize, f64> = BTreeMap::from([(1, 0.30), (2, -0.10), (3, -0.20)]);
        let gens: BTreeMap<usize, f64> = BTreeMap::from([(1, 2.0), (2, 2.0), (3, 2.0)]);
        let mut det = ActiveImbalanceDetector::new(0.01, 6, areas.clone(), gens.clone());
        // Area 1 sees its tie import rise by 0.63 while generation holds.
        let mut tie = areas.clone();
        tie.insert(1, 0.30 + 0.63);
        let mut verdict = DetectorVerdict::Quiet;
        for i in 0..6 {
            verdict = det.ingest(10.0 + i as f64 / 60.0, &tie, &gens);
        }
        match verdict {
            DetectorVerdict::Detected(r) => {
                assert_eq!(r.contingent_area, 1);
                assert_eq!(r.kind, ContingencyKind::LoadChange);
                assert!((r.magnitude - 0.63).abs() < 1e-12);
                assert!((r.onset_time - 10.0).abs() < 1e-12);
            }
            other => panic!("expected detection, got {other:?}"),
        }
    }

    #[test]
    fn detector_quiet_when_balanced() {
        let areas: BTreeMap<usize, f64> = BTreeMap::from([(1, 0.1), (2, -0.1)]);
        let gens: BTreeMap<usize, f64> = BTreeMap::from([(1, 1.0), (2, 1.0)]);
        let mut det = ActiveImbalanceDetector::new(0.01, 6, areas.clone(), gens.clone());
        for i in 0..20 {
            match det.ingest(i as f64 / 60.0, &areas, &gens) {
                DetectorVerdict::Quiet => {}
                other => panic!("expected quiet, got {other:?}"),
            }
        }
    }

    #[test]
    fn detector_flags_generation_trip() {
        let areas: BTreeMap<usize, f64> = BTreeMap::from([(1, 0.0), (2, 0.0)]);
        let gens: BTreeMap<usize, f64> = BTreeMap::from([(1, 2.0), (2, 2.0)]);
        let mut det = ActiveImbalanceDetector::new(0.01, 6, areas.clone(), gens.clone());
        // The exporting neighbor covers the transfer with its own
        // generation, so it stays balanced under the detection test.
        let tie = BTreeMap::from([(1, 0.69), (2, -0.69)]);
        let gen = BTreeMap::from([(1, 2.0 - 0.69), (2, 2.0 + 0.69)]);
        let mut verdict = DetectorVerdict::Quiet;
        for i in 0..6 {
            verdict = det.ingest(i as f64 / 60.0, &tie, &gen);
        }
        match verdict {
            DetectorVerdict::Detected(r) => {
                assert_eq!(r.kind, ContingencyKind::GenerationTrip);
                assert!((r.magnitude - 0.69).abs() < 1e-12);
            }
            other => panic!("expected detection, got {other:?}"),
        }
    }

    #[test]
    fn first_hierarchy_proportional_split() {
        let d = primary_dispatch_first_hierarchy(0.63, &[(21, 0.0, 0.50), (22, 0.0, 0.30)]);
        assert!((d.setpoints[0].2 - 0.39375).abs() < 1e-12);
        assert!((d.setpoints[1].2 - 0.23625).abs() < 1e-12);
        assert_eq!(d.residual_deficit, 0.0);
        // Conservation is exact.
        assert!((d.total_increment() - 0.63).abs() < 1e-12);
    }

    #[test]
    fn first_hierarchy_saturation_and_residual() {
        let d = primary_dispatch_first_hierarchy(1.30, &[(21, 0.0, 0.50), (22, 0.0, 0.40)]);
        assert!((d.setpoints[0].2 - 0.50).abs() < 1e-15);
        assert!((d.setpoints[1].2 - 0.40).abs() < 1e-15);
        assert!((d.residual_deficit - 0.40).abs() < 1e-12);
    }

    #[test]
    fn first_hierarchy_zero_step() {
        let d = primary_dispatch_first_hierarchy(0.0, &[(21, 0.1, 0.5)]);
        assert_eq!(d.residual_deficit, 0.0);
        assert_eq!(d.setpoints[0].2, 0.0);
    }

    #[test]
    fn higher_hierarchy_area_shares() {
        let d = primary_dispatch_higher_hierarchy(
            0.40,
            1,
            &[
                (2, vec![(10, 0.0, 0.4), (11, 0.0, 0.2)]),
                (3, vec![(32, 0.0, 0.2)]),
            ],
        );
        // Area shares 0.30 / 0.10, split 0.20/0.10 inside area 2.
        assert!((d.setpoints[0].2 - 0.20).abs() < 1e-12);
        assert!((d.setpoints[1].2 - 0.10).abs() < 1e-12);
        assert!((d.setpoints[2].2 - 0.10).abs() < 1e-12);
        assert_eq!(d.residual_deficit, 0.0);
    }

    #[test]
    fn higher_hierarchy_saturation() {
        let d = primary_dispatch_higher_hierarchy(
            1.0,
            1,
            &[(2, vec![(10, 0.0, 0.5)]), (3, vec![(32, 0.0, 0.3)])],
        );
        assert!((d.residual_deficit - 0.2).abs() < 1e-12);
        assert!((d.setpoints[0].2 - 0.5).abs() < 1e-15);
        assert!((d.setpoints[1].2 - 0.3).abs() < 1e-15);
    }
}
