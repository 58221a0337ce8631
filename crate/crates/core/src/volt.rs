//! Voltage-control pipeline: band-violation detection, dV/dQ sensitivity
//! ranking of the IBRs, class-1 reactive headroom dispatch, and the
//! sequential relaxation optimization that folds SG reserves in only when
//! the ranked IBRs cannot restore the profile alone.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{SensitivityError, StageError};
use crate::freq::REGULARIZATION_WEIGHT;
use crate::grid::{BusKind, Network};
use crate::optimizer::{
    solve_constrained_stage, Bound, ObjectiveTerm, QuantityBounds, StageOptions, StageSpec, VarRef,
};
use crate::powerflow::{
    injection_jacobian, regular_power_flow_setup, BusVariables, MaskEntry, PowerFlowSolution,
    Quantity, VariableMask,
};

/// Band parameters for detection and for the relaxation ladder.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VoltageBounds {
    pub local_min: f64,
    pub local_max: f64,
    /// Half-width of the global band around the pre-contingency profile.
    pub delta_upsilon: f64,
    /// Absolute operating range clamping the global band.
    pub global_floor: f64,
    pub global_ceiling: f64,
    /// Detection constants: a bus is flagged when |V| leaves
    /// `[V_pre - beta1, V_pre + beta2]`.
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for VoltageBounds {
    fn default() -> Self {
        VoltageBounds {
            local_min: 0.95,
            local_max: 1.05,
            delta_upsilon: 0.10,
            global_floor: 0.90,
            global_ceiling: 1.10,
            beta1: 0.05,
            beta2: 0.05,
        }
    }
}

/// Streaming per-bus voltage-band monitor.
#[derive(Debug, Clone)]
pub struct VoltageBandDetector {
    baseline: Vec<f64>,
    bounds: VoltageBounds,
    debounce_samples: usize,
    streak: Vec<usize>,
    onset: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageViolation {
    pub bus_index: usize,
    pub deviation: f64,
    pub onset_time: f64,
}

impl VoltageBandDetector {
    pub fn new(baseline: Vec<f64>, bounds: VoltageBounds, debounce_samples: usize) -> Self {
        let n = baseline.len();
        VoltageBandDetector {
            baseline,
            bounds,
            debounce_samples,
            streak: vec![0; n],
            onset: vec![0.0; n],
        }
    }

    /// Feeds one frame of bus voltage magnitudes. When several buses
    /// violate persistently, the one with the largest deviation is the
    /// contingent bus; the rest are attributed to propagation.
    pub fn ingest(&mut self, time: f64, vm: &[f64]) -> Option<VoltageViolation> {
        let mut worst: Option<VoltageViolation> = None;
        for (k, &v) in vm.iter().enumerate() {
            let lo = self.baseline[k] - self.bounds.beta1;
            let hi = self.baseline[k] + self.bounds.beta2;
            // Strict inequality: a sample exactly on the boundary passes.
            let dev = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                self.streak[k] = 0;
                continue;
            };
            if self.streak[k] == 0 {
                self.onset[k] = time;
            }
            self.streak[k] += 1;
            if self.streak[k] >= self.debounce_samples {
                let cand = VoltageViolation {
                    bus_index: k,
                    deviation: dev,
                    onset_time: self.onset[k],
                };
                worst = match worst {
                    Some(w) if w.deviation >= dev => Some(w),
                    _ => Some(cand),
                };
            }
        }
        worst
    }
}

/// Dense dV/dQ coefficients at an operating point.
#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    /// `s[(k, j)]` = d|V_k| / dQ_j. Rows of voltage-held buses and columns
    /// of non-perturbable buses are zero.
    pub s: DMatrix<f64>,
    /// The converged state the coefficients were computed at.
    pub operating_point: PowerFlowSolution,
    /// Total reactive injection at the operating point, for staleness checks.
    pub total_q: f64,
}

impl SensitivityMatrix {
    /// The operating point drifted by more than `threshold` p.u. of total
    /// reactive injection; the coefficients should be recomputed.
    pub fn is_stale(&self, state: &[BusVariables], threshold: f64) -> bool {
        let q: f64 = state.iter().map(|b| b.q).sum();
        (q - self.total_q).abs() > threshold
    }
}

/// V-Q block of the inverse power-flow Jacobian at the operating point.
///
/// Columns exist for buses whose reactive injection is a free perturbation
/// (PQ-type buses under the conventional mask); rows exist for buses whose
/// voltage magnitude is solved rather than held.
pub fn compute_sensitivity(
    network: &Network,
    operating_point: &PowerFlowSolution,
    slack_bus_id: usize,
) -> Result<SensitivityMatrix, SensitivityError> {
    if !operating_point.converged {
        return Err(SensitivityError::UnconvergedOperatingPoint);
    }
    let n = network.buses.len();
    let y = crate::grid::build_admittance(network)
        .map_err(|_| SensitivityError::UnconvergedOperatingPoint)?;
    let (mask, _) = regular_power_flow_setup(network, slack_bus_id)
        .map_err(|_| SensitivityError::UnconvergedOperatingPoint)?;

    let va_unknowns: Vec<usize> = (0..n).filter(|&k| !mask.entries[k].va_fixed).collect();
    let vm_unknowns: Vec<usize> = (0..n).filter(|&k| !mask.entries[k].vm_fixed).collect();
    let p_rows: Vec<usize> = (0..n).filter(|&k| mask.entries[k].p_fixed).collect();
    let q_rows: Vec<usize> = (0..n).filter(|&k| mask.entries[k].q_fixed).collect();
    let dim = va_unknowns.len() + vm_unknowns.len();

    let (dp_dva, dp_dvm, dq_dva, dq_dvm) = injection_jacobian(&y, &operating_point.bus_state);
    let mut jac = DMatrix::<f64>::zeros(dim, dim);
    for (r, &k) in p_rows.iter().enumerate() {
        for (c, &m) in va_unknowns.iter().enumerate() {
            jac[(r, c)] = dp_dva[(k, m)];
        }
        for (c, &m) in vm_unknowns.iter().enumerate() {
            jac[(r, va_unknowns.len() + c)] = dp_dvm[(k, m)];
        }
    }
    for (r, &k) in q_rows.iter().enumerate() {
        let row = p_rows.len() + r;
        for (c, &m) in va_unknowns.iter().enumerate() {
            jac[(row, c)] = dq_dva[(k, m)];
        }
        for (c, &m) in vm_unknowns.iter().enumerate() {
            jac[(row, va_unknowns.len() + c)] = dq_dvm[(k, m)];
        }
    }

    let lu = jac.lu();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for (qi, &j) in q_rows.iter().enumerate() {
        // A unit increase of Q injection at bus j perturbs that balance row.
        let mut rhs = nalgebra::DVector::<f64>::zeros(dim);
        rhs[p_rows.len() + qi] = 1.0;
        let dx = lu.solve(&rhs).ok_or(SensitivityError::Singular)?;
        for (c, &m) in vm_unknowns.iter().enumerate() {
            s[(m, j)] = dx[va_unknowns.len() + c];
        }
    }

    let total_q: f64 = operating_point.bus_state.iter().map(|b| b.q).sum();
    Ok(SensitivityMatrix {
        s,
        operating_point: operating_point.clone(),
        total_q,
    })
}

/// Ranked IBRs split into the minimal class covering the imbalance and the
/// remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbrClassPartition {
    /// IBR bus ids in descending sensitivity order toward the contingent bus.
    pub ranking: Vec<usize>,
    pub class1: Vec<usize>,
    pub class2: Vec<usize>,
}

/// Ranks IBRs by their dV/dQ coefficient toward the contingent bus and
/// takes the shortest prefix whose reactive headrooms cover the imbalance
/// (all of them when none qualifies).
pub fn rank_and_classify(
    s: &SensitivityMatrix,
    contingent_bus_index: usize,
    dq_l: f64,
    ibrs: &[(usize, usize, f64)], // (bus_id, bus_index, reactive headroom)
) -> IbrClassPartition {
    let mut ranked: Vec<(usize, f64, f64)> = ibrs
        .iter()
        .map(|&(id, idx, h)| (id, s.s[(contingent_bus_index, idx)], h))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let ranking: Vec<usize> = ranked.iter().map(|r| r.0).collect();
    let mut class1 = Vec::new();
    let mut acc = 0.0;
    for &(id, _, h) in &ranked {
        class1.push(id);
        acc += h;
        if acc >= dq_l {
            break;
        }
    }
    let class2 = ranking
        .iter()
        .copied()
        .filter(|id| !class1.contains(id))
        .collect();
    IbrClassPartition {
        ranking,
        class1,
        class2,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReactiveDispatch {
    /// `(bus_id, new q setpoint, increment)` in ranking order.
    pub setpoints: Vec<(usize, f64, f64)>,
    /// Imbalance left for the SG steps when even class 1 saturates.
    pub residual: f64,
}

/// Sequentially exhausts the class-1 headrooms in ranking order: every IBR
/// before the last gets its full headroom, the last takes the remainder.
pub fn primary_reactive_dispatch(
    partition: &IbrClassPartition,
    dq_l: f64,
    q_info: &BTreeMap<usize, (f64, f64)>, // bus_id -> (q_set, headroom)
) -> ReactiveDispatch {
    let mut setpoints = Vec::new();
    let mut remaining = dq_l.max(0.0);
    for id in &partition.class1 {
        let (q_set, h) = q_info.get(id).copied().unwrap_or((0.0, 0.0));
        let inc = remaining.min(h);
        setpoints.push((*id, q_set + inc, inc));
        remaining -= inc;
    }
    ReactiveDispatch {
        setpoints,
        residual: remaining.max(0.0),
    }
}

/// Which steps of the relaxation ladder ran, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoltStep {
    IbrLocal,
    IbrRelaxed,
    SgEngaged,
    SgHeld,
}

#[derive(Debug, Clone)]
pub struct VoltOutcome {
    pub solution: PowerFlowSolution,
    pub steps: Vec<VoltStep>,
    pub objective: f64,
    /// Per-SG AVR voltage targets from the accepted solution.
    pub sg_avr_setpoints: Vec<(usize, f64)>,
    /// Per-IBR `(bus_id, p, q)` setpoints.
    pub ibr_setpoints: Vec<(usize, f64, f64)>,
    /// Buses the accepted solution leaves outside the local band (allowed
    /// up to the global band).
    pub relaxed_buses: Vec<usize>,
    /// SG reactive outputs deviate from the schedule only when true.
    pub sg_engaged: bool,
}

struct VoltStageBuild {
    spec: StageSpec,
    load_buses: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn build_volt_stage(
    network: &Network,
    init: &[BusVariables],
    x_star: &PowerFlowSolution,
    step: VoltStep,
    classes: &IbrClassPartition,
    bounds_cfg: &VoltageBounds,
    relaxed: bool,
    load_overrides: &BTreeMap<usize, (f64, f64)>,
    class1_pin: &BTreeMap<usize, (f64, f64)>,
    q_targets: &BTreeMap<usize, f64>,
) -> VoltStageBuild {
    let n = network.buses.len();
    let mut entries = Vec::with_capacity(n);
    let mut initial = Vec::with_capacity(n);
    let mut bounds = Vec::with_capacity(n);
    let mut bus_ids = Vec::with_capacity(n);
    let mut objective = Vec::new();
    let mut load_buses = Vec::new();
    let mut mva_limits = Vec::new();

    // Steps that pin every IBR need another bus to carry the angle
    // reference and the loss slack: the lead machine becomes a
    // voltage-anchored balancer.
    let class2_empty = network
        .ibr_units
        .iter()
        .all(|u| classes.class1.contains(&u.bus_id));
    let sg_balancer = if class2_empty && matches!(step, VoltStep::SgEngaged | VoltStep::SgHeld) {
        network.sg_units.first().map(|u| u.bus_id)
    } else {
        None
    };

    for (k, bus) in network.buses.iter().enumerate() {
        bus_ids.push(bus.id);
        let xs = x_star.bus_state[k];
        let st = init[k];
        let mut b = QuantityBounds::FREE;

        // Load buses always keep the local band; other buses relax to the
        // global band around the pre-contingency profile when requested.
        let local = Bound::new(bounds_cfg.local_min, bounds_cfg.local_max);
        let global = Bound::new(
            (xs.vm - bounds_cfg.delta_upsilon).max(bounds_cfg.global_floor),
            (xs.vm + bounds_cfg.delta_upsilon).min(bounds_cfg.global_ceiling),
        );
        let (p_sched, q_sched) = {
            let (mut p, mut q) = network.scheduled_injection(bus.id);
            if let Some(&(dp, dq)) = load_overrides.get(&bus.id) {
                p -= dp;
                q -= dq;
            }
            (p, q)
        };

        match bus.kind {
            BusKind::Sg if sg_balancer == Some(bus.id) => {
                b.vm = if relaxed { global } else { local };
                if let Some(u) = network.sg_at(bus.id) {
                    b.p = Bound::new(u.p_min, u.p_max);
                    b.q = Bound::new(u.q_min, u.q_max);
                }
                entries.push(MaskEntry::VOLTAGE);
                initial.push(BusVariables {
                    vm: st.vm,
                    va: st.va,
                    p: st.p,
                    q: st.q,
                });
            }
            BusKind::Sg => {
                b.vm = if relaxed { global } else { local };
                match step {
                    VoltStep::IbrLocal | VoltStep::IbrRelaxed => {
                        // Reserves untouched: injection pinned to schedule.
                        entries.push(MaskEntry::PQ);
                        initial.push(BusVariables {
                            vm: st.vm,
                            va: st.va,
                            p: xs.p,
                            q: xs.q,
                        });
                    }
                    VoltStep::SgEngaged => {
                        // Angle and P pinned; |V| and Q released.
                        entries.push(MaskEntry::THETA_P);
                        if let Some(u) = network.sg_at(bus.id) {
                            b.q = Bound::new(u.q_min, u.q_max);
                        }
                        initial.push(BusVariables {
                            vm: st.vm,
                            va: st.va,
                            p: xs.p,
                            q: st.q,
                        });
                    }
                    VoltStep::SgHeld => {
                        // Hold whatever reactive output the previous step
                        // reached.
                        entries.push(MaskEntry::PQ);
                        initial.push(BusVariables {
                            vm: st.vm,
                            va: st.va,
                            p: xs.p,
                            q: st.q,
                        });
                    }
                }
            }
            BusKind::Ibr => {
                b.vm = if relaxed { global } else { local };
                let pinned = matches!(step, VoltStep::SgEngaged | VoltStep::SgHeld)
                    && classes.class1.contains(&bus.id);
                if pinned {
                    let (p, q) = class1_pin.get(&bus.id).copied().unwrap_or((st.p, st.q));
                    entries.push(MaskEntry::PQ);
                    initial.push(BusVariables {
                        vm: st.vm,
                        va: st.va,
                        p,
                        q,
                    });
                } else {
                    entries.push(MaskEntry::VOLTAGE);
                    if let Some(u) = network.ibr_at(bus.id) {
                        // See the frequency-stage builder: the circle
                        // replaces a coincident box cap.
                        let p_hi = if u.p_max < u.s_max { u.p_max } else { f64::INFINITY };
                        b.p = Bound::new(u.p_min, p_hi);
                        b.q = Bound::new(u.q_min, u.q_max);
                        mva_limits.push((k, u.s_max));
                        // Regularize toward the schedule (P) and the primary
                        // reactive targets (Q) so flat splits stay pinned.
                        objective.push(ObjectiveTerm::single(
                            REGULARIZATION_WEIGHT,
                            VarRef {
                                bus: k,
                                quantity: Quantity::P,
                            },
                            u.p_set,
                        ));
                        objective.push(ObjectiveTerm::single(
                            REGULARIZATION_WEIGHT,
                            VarRef {
                                bus: k,
                                quantity: Quantity::Q,
                            },
                            q_targets.get(&bus.id).copied().unwrap_or(u.q_set),
                        ));
                    }
                    initial.push(BusVariables {
                        vm: st.vm,
                        va: st.va,
                        p: st.p,
                        q: st.q,
                    });
                }
            }
            BusKind::Load => {
                b.vm = local;
                load_buses.push(k);
                entries.push(MaskEntry::PQ);
                initial.push(BusVariables {
                    vm: st.vm,
                    va: st.va,
                    p: p_sched,
                    q: q_sched,
                });
            }
            BusKind::Transfer => {
                b.vm = if relaxed { global } else { local };
                entries.push(MaskEntry::PQ);
                initial.push(BusVariables {
                    vm: st.vm,
                    va: st.va,
                    p: p_sched,
                    q: q_sched,
                });
            }
        }
        bounds.push(b);
    }

    // Flat-profile objective over the load buses.
    for &k in &load_buses {
        objective.push(ObjectiveTerm::single(
            1.0,
            VarRef {
                bus: k,
                quantity: Quantity::Vm,
            },
            1.0,
        ));
    }

    VoltStageBuild {
        spec: StageSpec {
            mask: VariableMask { entries },
            initial,
            objective,
            bounds,
            balance_scope: (0..n).collect(),
            hard_reference: BTreeSet::new(),
            bus_ids,
            mva_limits,
        },
        load_buses,
    }
}

fn flat_objective(solution: &PowerFlowSolution, load_buses: &[usize]) -> f64 {
    load_buses
        .iter()
        .map(|&k| (solution.bus_state[k].vm - 1.0).powi(2))
        .sum()
}

/// Runs the sequential relaxation ladder and returns the first accepted
/// solution: ranked IBRs under local bounds, then relaxed bounds, then SG
/// reserves, then a final pass with the SG injections held.
pub fn sequential_voltage_optimization(
    network: &Network,
    x_star: &PowerFlowSolution,
    classes: &IbrClassPartition,
    bounds_cfg: &VoltageBounds,
    load_overrides: &BTreeMap<usize, (f64, f64)>,
    q_targets: &BTreeMap<usize, f64>,
    opts: &StageOptions,
) -> Result<VoltOutcome, StageError> {
    let y = crate::grid::build_admittance(network)
        .map_err(|e| StageError::BadSpec(e.to_string()))?;

    // No imbalance and a healthy profile: nothing to dispatch.
    let quiet = load_overrides.values().all(|&(p, q)| p == 0.0 && q == 0.0);
    let healthy = network.buses.iter().enumerate().all(|(k, b)| {
        b.kind != BusKind::Load
            || (x_star.bus_state[k].vm >= bounds_cfg.local_min
                && x_star.bus_state[k].vm <= bounds_cfg.local_max)
    });
    if quiet && healthy {
        let load_buses: Vec<usize> = network
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Load)
            .map(|(k, _)| k)
            .collect();
        return Ok(VoltOutcome {
            objective: flat_objective(x_star, &load_buses),
            solution: x_star.clone(),
            steps: Vec::new(),
            sg_avr_setpoints: sg_voltage_setpoints(network, x_star),
            ibr_setpoints: ibr_from_solution(network, x_star),
            relaxed_buses: Vec::new(),
            sg_engaged: false,
        });
    }

    let mut steps = Vec::new();
    let empty_pin = BTreeMap::new();

    // Step 3: class-1 and class-2 IBRs under local bounds, SG untouched.
    steps.push(VoltStep::IbrLocal);
    let b3 = build_volt_stage(
        network,
        &x_star.bus_state,
        x_star,
        VoltStep::IbrLocal,
        classes,
        bounds_cfg,
        false,
        load_overrides,
        &empty_pin,
        q_targets,
    );
    if let Ok(r) = solve_constrained_stage(&y, &b3.spec, opts) {
        return Ok(finish(
            network, r.solution, steps, &b3.load_buses, bounds_cfg, false, x_star,
        ));
    }

    // Step 4: same masks with SG/IBR/transfer voltages relaxed to the
    // global band.
    steps.push(VoltStep::IbrRelaxed);
    let b4 = build_volt_stage(
        network,
        &x_star.bus_state,
        x_star,
        VoltStep::IbrRelaxed,
        classes,
        bounds_cfg,
        true,
        load_overrides,
        &empty_pin,
        q_targets,
    );
    let s4 = solve_constrained_stage(&y, &b4.spec, opts);
    let (init5, obj4) = match &s4 {
        Ok(r) => (r.solution.bus_state.clone(), Some(r.objective_value)),
        Err(StageError::NotConverged { last, .. }) => (last.bus_state.clone(), None),
        Err(_) => (x_star.bus_state.clone(), None),
    };

    // Step 5: class 1 holds the injections it reached, or its primary
    // reactive targets when the relaxed pass produced no usable iterate;
    // SG voltage and VAR reserves engage.
    steps.push(VoltStep::SgEngaged);
    let had_iterate = !matches!(&s4, Err(StageError::Infeasible { .. }));
    let class1_pin: BTreeMap<usize, (f64, f64)> = classes
        .class1
        .iter()
        .filter_map(|id| {
            network.bus_index(*id).map(|k| {
                let q = if had_iterate {
                    init5[k].q
                } else {
                    q_targets
                        .get(id)
                        .copied()
                        .unwrap_or(network.ibr_at(*id).map(|u| u.q_set).unwrap_or(0.0))
                };
                (*id, (init5[k].p, q))
            })
        })
        .collect();
    let b5 = build_volt_stage(
        network,
        &init5,
        x_star,
        VoltStep::SgEngaged,
        classes,
        bounds_cfg,
        true,
        load_overrides,
        &class1_pin,
        q_targets,
    );
    let s5 = solve_constrained_stage(&y, &b5.spec, opts);
    match s5 {
        Ok(r) => {
            // Accepted solutions never get worse along the ladder.
            if let Some(prev) = obj4 {
                debug_assert!(r.objective_value <= prev + 1e-9);
            }
            Ok(finish(
                network, r.solution, steps, &b5.load_buses, bounds_cfg, true, x_star,
            ))
        }
        Err(StageError::NotConverged { last, .. }) => {
            // Step 6: hold the SG injections reached so far, final pass on
            // class 2 alone.
            steps.push(VoltStep::SgHeld);
            let init6 = last.bus_state;
            let b6 = build_volt_stage(
                network,
                &init6,
                x_star,
                VoltStep::SgHeld,
                classes,
                bounds_cfg,
                true,
                load_overrides,
                &class1_pin,
                q_targets,
            );
            match solve_constrained_stage(&y, &b6.spec, opts) {
                Ok(r) => Ok(finish(
                    network, r.solution, steps, &b6.load_buses, bounds_cfg, true, x_star,
                )),
                Err(e) => Err(e),
            }
        }
        Err(e) => {
            // Step 6 from the step-4 iterate.
            steps.push(VoltStep::SgHeld);
            let b6 = build_volt_stage(
                network,
                &init5,
                x_star,
                VoltStep::SgHeld,
                classes,
                bounds_cfg,
                true,
                load_overrides,
                &class1_pin,
                q_targets,
            );
            match solve_constrained_stage(&y, &b6.spec, opts) {
                Ok(r) => Ok(finish(
                    network, r.solution, steps, &b6.load_buses, bounds_cfg, true, x_star,
                )),
                Err(_) => Err(e),
            }
        }
    }
}

fn sg_voltage_setpoints(network: &Network, sol: &PowerFlowSolution) -> Vec<(usize, f64)> {
    network
        .sg_units
        .iter()
        .filter_map(|u| {
            network
                .bus_index(u.bus_id)
                .map(|k| (u.bus_id, sol.bus_state[k].vm))
        })
        .collect()
}

fn ibr_from_solution(network: &Network, sol: &PowerFlowSolution) -> Vec<(usize, f64, f64)> {
    network
        .ibr_units
        .iter()
        .filter_map(|u| {
            network
                .bus_index(u.bus_id)
                .map(|k| (u.bus_id, sol.bus_state[k].p, sol.bus_state[k].q))
        })
        .collect()
}

fn finish(
    network: &Network,
    solution: PowerFlowSolution,
    steps: Vec<VoltStep>,
    load_buses: &[usize],
    bounds_cfg: &VoltageBounds,
    sg_engaged: bool,
    x_star: &PowerFlowSolution,
) -> VoltOutcome {
    let relaxed_buses: Vec<usize> = network
        .buses
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let v = solution.bus_state[*k].vm;
            v < bounds_cfg.local_min - 1e-9 || v > bounds_cfg.local_max + 1e-9
        })
        .map(|(_, b)| b.id)
        .collect();
    // SG engagement is judged by actual reactive deviation, not by which
    // step produced the solution.
    let engaged = sg_engaged
        && network.sg_units.iter().any(|u| {
            let k = network.bus_index(u.bus_id).unwrap();
            (solution.bus_state[k].q - x_star.bus_state[k].q).abs() > 1e-6
        });
    VoltOutcome {
        objective: flat_objective(&solution, load_buses),
        sg_avr_setpoints: sg_voltage_setpoints(network, &solution),
        ibr_setpoints: ibr_from_solution(network, &solution),
        solution,
        steps,
        relaxed_buses,
        sg_engaged: engaged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Area, Branch, Bus, LoadDemand, BASE_MVA};
    use crate::powerflow::{solve_regular_power_flow, NrOptions};
    use num_complex::Complex64;

    fn radial_two_bus(x: f64) -> Network {
        Network {
            buses: vec![
                Bus {
                    id: 1,
                    kind: BusKind::Sg,
                    area_id: 1,
                    voltage_magnitude: 1.0,
                    voltage_angle: 0.0,
                    p_injection: 0.2,
                    q_injection: 0.1,
                    v_min: 0.8,
                    v_max: 1.2,
                },
                Bus {
                    id: 2,
                    kind: BusKind::Load,
                    area_id: 1,
                    voltage_magnitude: 1.0,
                    voltage_angle: 0.0,
                    p_injection: -0.2,
                    q_injection: -0.1,
                    v_min: 0.8,
                    v_max: 1.2,
                },
            ],
            branches: vec![Branch {
                from_bus: 1,
                to_bus: 2,
                series_impedance: Complex64::new(0.0, x),
                shunt_admittance: Complex64::new(0.0, 0.0),
                thermal_rating_p: 10.0,
                is_tie_line: false,
            }],
            sg_units: vec![],
            ibr_units: vec![],
            loads: std::collections::BTreeMap::from([(2, LoadDemand { p: 0.2, q: 0.1 })]),
            areas: vec![Area {
                id: 1,
                name: "A".into(),
                bus_ids: std::collections::BTreeSet::from([1, 2]),
            }],
            base_mva: BASE_MVA,
        }
    }

    #[test]
    fn sensitivity_radial_two_bus_near_reactance() {
        let net = radial_two_bus(0.1);
        let sol = solve_regular_power_flow(&net, 1, &NrOptions::default()).unwrap();
        let s = compute_sensitivity(&net, &sol, 1).unwrap();
        // Short-line approximation: dV2/dQ2 ~ X.
        let v = s.s[(1, 1)];
        assert!((v - 0.1).abs() / 0.1 < 0.05, "dV/dQ = {v}");
        // The slack/voltage-held bus has zero row and column.
        assert_eq!(s.s[(0, 0)], 0.0);
        assert_eq!(s.s[(0, 1)], 0.0);
    }

    #[test]
    fn sensitivity_matches_finite_difference() {
        let net = radial_two_bus(0.15);
        let sol = solve_regular_power_flow(&net, 1, &NrOptions::default()).unwrap();
        let s = compute_sensitivity(&net, &sol, 1).unwrap();
        // Finite-difference oracle: inject dQ at bus 2 and re-solve.
        let dq = 1e-4;
        let mut net2 = net.clone();
        net2.loads.get_mut(&2).unwrap().q -= dq;
        let sol2 = solve_regular_power_flow(&net2, 1, &NrOptions::default()).unwrap();
        let fd = (sol2.bus_state[1].vm - sol.bus_state[1].vm) / dq;
        let rel = (s.s[(1, 1)] - fd).abs() / fd.abs().max(1e-12);
        assert!(rel <= 1e-4, "analytic {} vs fd {fd}", s.s[(1, 1)]);
    }

    #[test]
    fn sensitivity_stiff_bus_is_pinned() {
        // A bus tied to the voltage-held slack through a near-zero
        // impedance barely moves.
        let mut net = radial_two_bus(0.1);
        net.branches[0].series_impedance = Complex64::new(0.0, 1e-5);
        let sol = solve_regular_power_flow(&net, 1, &NrOptions::default()).unwrap();
        let s = compute_sensitivity(&net, &sol, 1).unwrap();
        assert!(s.s[(1, 1)].abs() < 1e-4);
    }

    #[test]
    fn sensitivity_staleness_guard() {
        let net = radial_two_bus(0.1);
        let sol = solve_regular_power_flow(&net, 1, &NrOptions::default()).unwrap();
        let s = compute_sensitivity(&net, &sol, 1).unwrap();
        assert!(!s.is_stale(&sol.bus_state, 0.05));
        // A dispatch moving total reactive injection past the threshold
        // forces a recompute.
        let mut moved = sol.bus_state.clone();
        moved[0].q += 0.2;
        assert!(s.is_stale(&moved, 0.05));
        assert!(!s.is_stale(&moved, 0.5));
    }

    #[test]
    fn detector_band_logic() {
        let bounds = VoltageBounds::default();
        let mut det = VoltageBandDetector::new(vec![1.0, 1.0], bounds, 6);
        // Exactly at the boundary: never flagged.
        for i in 0..10 {
            assert!(det.ingest(i as f64 / 60.0, &[1.0, 0.95]).is_none());
        }
        // Sagging below: flagged after the debounce window.
        let mut hit = None;
        for i in 0..6 {
            hit = det.ingest(10.0 + i as f64 / 60.0, &[1.0, 0.90]);
        }
        let v = hit.expect("violation");
        assert_eq!(v.bus_index, 1);
        assert!((v.onset_time - 10.0).abs() < 1e-12);
    }

    #[test]
    fn classify_prefix_sum() {
        let mut s = SensitivityMatrix {
            s: DMatrix::zeros(4, 4),
            operating_point: PowerFlowSolution {
                bus_state: vec![],
                converged: true,
                iterations: 0,
                max_mismatch: 0.0,
            },
            total_q: 0.0,
        };
        s.s[(0, 1)] = 0.08;
        s.s[(0, 2)] = 0.05;
        s.s[(0, 3)] = 0.02;
        let part = rank_and_classify(
            &s,
            0,
            0.7,
            &[(11, 1, 0.4), (12, 2, 0.4), (13, 3, 0.4)],
        );
        assert_eq!(part.ranking, vec![11, 12, 13]);
        assert_eq!(part.class1, vec![11, 12]);
        assert_eq!(part.class2, vec![13]);

        // Imbalance above every headroom: class 1 takes everyone.
        let all = rank_and_classify(&s, 0, 2.0, &[(11, 1, 0.4), (12, 2, 0.4), (13, 3, 0.4)]);
        assert_eq!(all.class1.len(), 3);
        assert!(all.class2.is_empty());
    }

    #[test]
    fn reactive_dispatch_sequential() {
        let part = IbrClassPartition {
            ranking: vec![11, 12],
            class1: vec![11, 12],
            class2: vec![],
        };
        let info = BTreeMap::from([(11, (0.0, 0.4)), (12, (0.0, 0.4))]);
        let d = primary_reactive_dispatch(&part, 0.7, &info);
        assert!((d.setpoints[0].2 - 0.4).abs() < 1e-15);
        assert!((d.setpoints[1].2 - 0.3).abs() < 1e-15);
        assert_eq!(d.residual, 0.0);

        // Exactly the first headroom.
        let d = primary_reactive_dispatch(&part, 0.4, &info);
        assert!((d.setpoints[0].2 - 0.4).abs() < 1e-15);
        assert!((d.setpoints[1].2 - 0.0).abs() < 1e-15);

        // Zero imbalance.
        let d = primary_reactive_dispatch(&part, 0.0, &info);
        assert!(d.setpoints.iter().all(|s| s.2 == 0.0));
    }
}
