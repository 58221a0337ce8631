//! Static grid model: buses, branches, devices, control areas, and the
//! hierarchy partition that anchors the staged optimization at a
//! contingent area.
//!
//! All electrical quantities are per unit on the system MVA base
//! (100 MVA); megawatt values appear only at I/O boundaries.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::GridError;

/// System-wide MVA base.
pub const BASE_MVA: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    /// Synchronous generator bus.
    Sg,
    /// Inverter-based resource bus.
    Ibr,
    /// Load bus.
    Load,
    /// Transfer bus with no connected component.
    Transfer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub area_id: usize,
    /// Scheduled |V| in p.u.; also the flat-start profile for solvers.
    pub voltage_magnitude: f64,
    /// Scheduled angle in radians.
    pub voltage_angle: f64,
    /// Scheduled net active injection, p.u. (generation positive, load negative).
    pub p_injection: f64,
    /// Scheduled net reactive injection, p.u.
    pub q_injection: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    /// Series impedance, p.u.
    pub series_impedance: Complex64,
    /// Total line-charging admittance, p.u. (half applied at each end).
    pub shunt_admittance: Complex64,
    /// Active-power thermal rating, p.u.
    pub thermal_rating_p: f64,
    pub is_tie_line: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgUnit {
    pub bus_id: usize,
    pub p_set: f64,
    pub q_set: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Inertia constant H, seconds.
    pub inertia_h: f64,
    /// Damping coefficient, p.u. torque per p.u. speed deviation.
    pub damping_d: f64,
    /// Governor droop R, p.u.
    pub droop_r: f64,
    pub governor_time_constant: f64,
    pub avr_gain: f64,
    pub avr_time_constant: f64,
    /// AGC participation factor; factors sum to 1 within an area.
    pub agc_participation_factor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbrUnit {
    pub bus_id: usize,
    pub p_set: f64,
    pub q_set: f64,
    /// MVA rating, p.u.
    pub s_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// First-order actuation lag, seconds.
    pub actuation_time_constant: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadDemand {
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Area {
    pub id: usize,
    pub name: String,
    pub bus_ids: BTreeSet<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub sg_units: Vec<SgUnit>,
    pub ibr_units: Vec<IbrUnit>,
    /// Demand by bus id (positive = consumption).
    pub loads: BTreeMap<usize, LoadDemand>,
    pub areas: Vec<Area>,
    pub base_mva: f64,
}

impl Network {
    /// Position of a bus id in `buses`, which is also its row in the
    /// admittance matrix.
    pub fn bus_index(&self, bus_id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == bus_id)
    }

    pub fn bus(&self, bus_id: usize) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == bus_id)
    }

    pub fn area(&self, area_id: usize) -> Option<&Area> {
        self.areas.iter().find(|a| a.id == area_id)
    }

    pub fn sg_at(&self, bus_id: usize) -> Option<&SgUnit> {
        self.sg_units.iter().find(|u| u.bus_id == bus_id)
    }

    pub fn ibr_at(&self, bus_id: usize) -> Option<&IbrUnit> {
        self.ibr_units.iter().find(|u| u.bus_id == bus_id)
    }

    /// Tie-line branch indices incident to the given area.
    pub fn area_tie_branches(&self, area_id: usize) -> Vec<usize> {
        let area = match self.area(area_id) {
            Some(a) => a,
            None => return Vec::new(),
        };
        self.branches
            .iter()
            .enumerate()
            .filter(|(_, br)| {
                br.is_tie_line
                    && (area.bus_ids.contains(&br.from_bus) || area.bus_ids.contains(&br.to_bus))
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Net scheduled injection at a bus from units and loads.
    pub fn scheduled_injection(&self, bus_id: usize) -> (f64, f64) {
        let mut p = 0.0;
        let mut q = 0.0;
        for u in self.sg_units.iter().filter(|u| u.bus_id == bus_id) {
            p += u.p_set;
            q += u.q_set;
        }
        for u in self.ibr_units.iter().filter(|u| u.bus_id == bus_id) {
            p += u.p_set;
            q += u.q_set;
        }
        if let Some(l) = self.loads.get(&bus_id) {
            p -= l.p;
            q -= l.q;
        }
        (p, q)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let mut seen = BTreeSet::new();
        for bus in &self.buses {
            if !seen.insert(bus.id) {
                return Err(GridError::DuplicateBus(bus.id));
            }
            if !(bus.v_min < bus.v_max) {
                return Err(GridError::InvalidBus {
                    bus: bus.id,
                    what: format!("v_min {} must be below v_max {}", bus.v_min, bus.v_max),
                });
            }
            for (name, v) in [
                ("voltage_magnitude", bus.voltage_magnitude),
                ("voltage_angle", bus.voltage_angle),
                ("p_injection", bus.p_injection),
                ("q_injection", bus.q_injection),
            ] {
                if !v.is_finite() {
                    return Err(GridError::InvalidBus {
                        bus: bus.id,
                        what: format!("{name} not finite"),
                    });
                }
            }
            if self.area(bus.area_id).is_none() {
                return Err(GridError::UnknownArea(bus.area_id));
            }
        }

        // Areas partition the bus set.
        for bus in &self.buses {
            let n = self
                .areas
                .iter()
                .filter(|a| a.bus_ids.contains(&bus.id))
                .count();
            if n != 1 {
                return Err(GridError::OverlappingAreas(bus.id, n));
            }
        }
        for area in &self.areas {
            for id in &area.bus_ids {
                if self.bus(*id).is_none() {
                    return Err(GridError::UnknownBus(*id));
                }
            }
        }

        for br in &self.branches {
            if br.from_bus == br.to_bus {
                return Err(GridError::TieFlagMismatch {
                    from: br.from_bus,
                    to: br.to_bus,
                });
            }
            let from = self.bus(br.from_bus).ok_or(GridError::UnknownBus(br.from_bus))?;
            let to = self.bus(br.to_bus).ok_or(GridError::UnknownBus(br.to_bus))?;
            if br.series_impedance.norm() < 1e-12 {
                return Err(GridError::DegenerateBranch {
                    from: br.from_bus,
                    to: br.to_bus,
                });
            }
            if br.is_tie_line != (from.area_id != to.area_id) {
                return Err(GridError::TieFlagMismatch {
                    from: br.from_bus,
                    to: br.to_bus,
                });
            }
        }

        for u in &self.sg_units {
            let bus = self.bus(u.bus_id).ok_or(GridError::UnknownBus(u.bus_id))?;
            if bus.kind != BusKind::Sg {
                return Err(GridError::InvalidUnit {
                    bus: u.bus_id,
                    what: "SG unit on a non-SG bus".into(),
                });
            }
            if !(u.p_min <= u.p_set && u.p_set <= u.p_max) {
                return Err(GridError::InvalidUnit {
                    bus: u.bus_id,
                    what: format!("p_set {} outside [{}, {}]", u.p_set, u.p_min, u.p_max),
                });
            }
            if !(u.q_min <= u.q_set && u.q_set <= u.q_max) {
                return Err(GridError::InvalidUnit {
                    bus: u.bus_id,
                    what: format!("q_set {} outside [{}, {}]", u.q_set, u.q_min, u.q_max),
                });
            }
            if u.inertia_h <= 0.0 {
                return Err(GridError::InvalidUnit {
                    bus: u.bus_id,
                    what: "inertia must be positive".into(),
                });
            }
        }

        // Per-area AGC participation factors sum to 1 (areas with SGs only).
        for area in &self.areas {
            let sum: f64 = self
                .sg_units
                .iter()
                .filter(|u| area.bus_ids.contains(&u.bus_id))
                .map(|u| u.agc_participation_factor)
                .sum();
            let has_sg = self
                .sg_units
                .iter()
                .any(|u| area.bus_ids.contains(&u.bus_id));
            if has_sg && (sum - 1.0).abs() > 1e-9 {
                return Err(GridError::ParticipationSum { area: area.id, sum });
            }
        }

        for u in &self.ibr_units {
            let bus = self.bus(u.bus_id).ok_or(GridError::UnknownBus(u.bus_id))?;
            if bus.kind != BusKind::Ibr {
                return Err(GridError::InvalidUnit {
                    bus: u.bus_id,
                    what: "IBR unit on a non-IBR bus".into(),
                });
            }
            if u.p_set.hypot(u.q_set) > u.s_max + 1e-9 {
                return Err(GridError::InvalidUnit {
                    bus: u.bus_id,
                    what: format!(
                        "setpoint ({}, {}) outside MVA circle of radius {}",
                        u.p_set, u.q_set, u.s_max
                    ),
                });
            }
            if !(u.p_min <= u.p_set && u.p_set <= u.p_max)
                || !(u.q_min <= u.q_set && u.q_set <= u.q_max)
            {
                return Err(GridError::InvalidUnit {
                    bus: u.bus_id,
                    what: "setpoint outside box limits".into(),
                });
            }
        }

        Ok(())
    }
}

/// Contingency-anchored labeling of areas into hierarchy levels.
///
/// `levels[0]` holds the contingent area; `levels[i]` holds the areas at
/// tie-line BFS distance `i` from it. `boundary_buses[(i, i+1)]` is the set
/// of level-`i` buses that terminate a tie line toward level `i+1`;
/// `tie_lines[(i, i+1)]` lists those branch indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyPartition {
    pub contingent_area: usize,
    pub levels: Vec<BTreeSet<usize>>,
    pub boundary_buses: BTreeMap<(usize, usize), BTreeSet<usize>>,
    pub tie_lines: BTreeMap<(usize, usize), Vec<usize>>,
    /// Areas not reachable from the contingent area over tie lines.
    pub excluded_areas: BTreeSet<usize>,
}

impl HierarchyPartition {
    /// Hierarchy level of an area (0-based), if reachable.
    pub fn level_of(&self, area_id: usize) -> Option<usize> {
        self.levels.iter().position(|s| s.contains(&area_id))
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Builds the standard nodal admittance matrix from the pi-model branch data.
///
/// Row/column order follows bus positions in `network.buses`.
pub fn build_admittance(network: &Network) -> Result<DMatrix<Complex64>, GridError> {
    let n = network.buses.len();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for br in &network.branches {
        if br.series_impedance.norm() < 1e-12 {
            return Err(GridError::DegenerateBranch {
                from: br.from_bus,
                to: br.to_bus,
            });
        }
        let k = network
            .bus_index(br.from_bus)
            .ok_or(GridError::UnknownBus(br.from_bus))?;
        let m = network
            .bus_index(br.to_bus)
            .ok_or(GridError::UnknownBus(br.to_bus))?;
        let y_series = Complex64::new(1.0, 0.0) / br.series_impedance;
        let y_half = br.shunt_admittance / 2.0;
        y[(k, k)] += y_series + y_half;
        y[(m, m)] += y_series + y_half;
        y[(k, m)] -= y_series;
        y[(m, k)] -= y_series;
    }
    Ok(y)
}

/// Admittance matrix of a bus subset, keeping only branches with both
/// endpoints inside the subset. `scope` maps local index -> global bus
/// position.
pub fn build_scoped_admittance(
    network: &Network,
    scope: &[usize],
    branch_filter: impl Fn(usize, &Branch) -> bool,
) -> Result<DMatrix<Complex64>, GridError> {
    let n = scope.len();
    let mut local_of = BTreeMap::new();
    for (li, &gi) in scope.iter().enumerate() {
        local_of.insert(network.buses[gi].id, li);
    }
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for (bi, br) in network.branches.iter().enumerate() {
        let (Some(&k), Some(&m)) = (local_of.get(&br.from_bus), local_of.get(&br.to_bus)) else {
            continue;
        };
        if !branch_filter(bi, br) {
            continue;
        }
        if br.series_impedance.norm() < 1e-12 {
            return Err(GridError::DegenerateBranch {
                from: br.from_bus,
                to: br.to_bus,
            });
        }
        let y_series = Complex64::new(1.0, 0.0) / br.series_impedance;
        let y_half = br.shunt_admittance / 2.0;
        y[(k, k)] += y_series + y_half;
        y[(m, m)] += y_series + y_half;
        y[(k, m)] -= y_series;
        y[(m, k)] -= y_series;
    }
    Ok(y)
}

/// Breadth-first hierarchy assignment over the area adjacency graph, where
/// two areas are adjacent when a tie line connects them.
pub fn assign_hierarchies(
    network: &Network,
    contingent_area: usize,
) -> Result<HierarchyPartition, GridError> {
    if network.area(contingent_area).is_none() {
        return Err(GridError::UnknownArea(contingent_area));
    }

    // Area adjacency from tie lines.
    let mut adjacency: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for br in network.branches.iter().filter(|b| b.is_tie_line) {
        let a = network.bus(br.from_bus).ok_or(GridError::UnknownBus(br.from_bus))?;
        let b = network.bus(br.to_bus).ok_or(GridError::UnknownBus(br.to_bus))?;
        adjacency.entry(a.area_id).or_default().insert(b.area_id);
        adjacency.entry(b.area_id).or_default().insert(a.area_id);
    }

    let mut depth: BTreeMap<usize, usize> = BTreeMap::new();
    depth.insert(contingent_area, 0);
    let mut queue = VecDeque::from([contingent_area]);
    while let Some(area) = queue.pop_front() {
        let d = depth[&area];
        if let Some(neighbors) = adjacency.get(&area) {
            for &next in neighbors {
                if let std::collections::btree_map::Entry::Vacant(e) = depth.entry(next) {
                    e.insert(d + 1);
                    queue.push_back(next);
                }
            }
        }
    }

    let n_levels = depth.values().copied().max().unwrap_or(0) + 1;
    let mut levels = vec![BTreeSet::new(); n_levels];
    for (&area, &d) in &depth {
        levels[d].insert(area);
    }
    let excluded_areas: BTreeSet<usize> = network
        .areas
        .iter()
        .map(|a| a.id)
        .filter(|id| !depth.contains_key(id))
        .collect();

    let mut boundary_buses: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    let mut tie_lines: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (bi, br) in network.branches.iter().enumerate() {
        if !br.is_tie_line {
            continue;
        }
        let area_from = network.bus(br.from_bus).unwrap().area_id;
        let area_to = network.bus(br.to_bus).unwrap().area_id;
        let (Some(&df), Some(&dt)) = (depth.get(&area_from), depth.get(&area_to)) else {
            continue;
        };
        if df + 1 == dt {
            boundary_buses.entry((df, dt)).or_default().insert(br.from_bus);
            tie_lines.entry((df, dt)).or_default().push(bi);
        } else if dt + 1 == df {
            boundary_buses.entry((dt, df)).or_default().insert(br.to_bus);
            tie_lines.entry((dt, df)).or_default().push(bi);
        }
        // Ties between same-level areas stay interior to that level.
    }
    for lines in tie_lines.values_mut() {
        lines.sort_unstable();
    }

    Ok(HierarchyPartition {
        contingent_area,
        levels,
        boundary_buses,
        tie_lines,
        excluded_areas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadroomMode {
    Active,
    Reactive,
}

/// Dispatchable capacity from the current setpoint to the binding limit
/// (box limits intersected with the MVA circle), floored at zero.
pub fn compute_headroom(unit: &IbrUnit, mode: HeadroomMode) -> f64 {
    let h = match mode {
        HeadroomMode::Active => unit.p_max.min(unit.s_max) - unit.p_set,
        HeadroomMode::Reactive => {
            let circle = (unit.s_max * unit.s_max - unit.p_set * unit.p_set).max(0.0).sqrt();
            unit.q_max.min(circle) - unit.q_set
        }
    };
    h.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus_network() -> Network {
        Network {
            buses: vec![
                Bus {
                    id: 1,
                    kind: BusKind::Sg,
                    area_id: 1,
                    voltage_magnitude: 1.0,
                    voltage_angle: 0.0,
                    p_injection: 0.5,
                    q_injection: 0.2,
                    v_min: 0.95,
                    v_max: 1.05,
                },
                Bus {
                    id: 2,
                    kind: BusKind::Load,
                    area_id: 2,
                    voltage_magnitude: 1.0,
                    voltage_angle: 0.0,
                    p_injection: -0.5,
                    q_injection: -0.2,
                    v_min: 0.95,
                    v_max: 1.05,
                },
            ],
            branches: vec![Branch {
                from_bus: 1,
                to_bus: 2,
                series_impedance: Complex64::new(0.05, 0.20),
                shunt_admittance: Complex64::new(0.0, 0.15),
                thermal_rating_p: 2.0,
                is_tie_line: true,
            }],
            sg_units: vec![],
            ibr_units: vec![],
            loads: BTreeMap::new(),
            areas: vec![
                Area {
                    id: 1,
                    name: "A".into(),
                    bus_ids: BTreeSet::from([1]),
                },
                Area {
                    id: 2,
                    name: "B".into(),
                    bus_ids: BTreeSet::from([2]),
                },
            ],
            base_mva: BASE_MVA,
        }
    }

    #[test]
    fn admittance_two_bus_pi_model() {
        let net = two_bus_network();
        let y = build_admittance(&net).unwrap();
        // Independent complex arithmetic for the tie-line parameters:
        // 1/z and the half charging term.
        let z = Complex64::new(0.05, 0.20);
        let ys = Complex64::new(1.0, 0.0) / z;
        let expect_off = -ys;
        let expect_diag = ys + Complex64::new(0.0, 0.075);
        assert!((y[(0, 1)] - expect_off).norm() < 1e-12);
        assert!((y[(1, 0)] - expect_off).norm() < 1e-12);
        assert!((y[(0, 0)] - expect_diag).norm() < 1e-12);
        // Frozen values from the pi-model arithmetic.
        assert!((y[(0, 1)] - Complex64::new(-1.17647, 4.70588)).norm() < 1e-4);
        assert!((y[(0, 0)] - Complex64::new(1.17647, -4.63088)).norm() < 1e-4);
    }

    #[test]
    fn admittance_single_bus_is_zero() {
        let mut net = two_bus_network();
        net.branches.clear();
        net.buses.truncate(1);
        net.areas.truncate(1);
        let y = build_admittance(&net).unwrap();
        assert_eq!(y.nrows(), 1);
        assert_eq!(y[(0, 0)], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn admittance_row_sums_vanish_without_shunts() {
        let mut net = two_bus_network();
        for br in &mut net.branches {
            br.shunt_admittance = Complex64::new(0.0, 0.0);
        }
        let y = build_admittance(&net).unwrap();
        for k in 0..y.nrows() {
            let sum: Complex64 = (0..y.ncols()).map(|m| y[(k, m)]).sum();
            assert!(sum.norm() < 1e-12, "row {k} sums to {sum}");
        }
    }

    #[test]
    fn degenerate_branch_rejected() {
        let mut net = two_bus_network();
        net.branches[0].series_impedance = Complex64::new(0.0, 0.0);
        assert!(matches!(
            build_admittance(&net),
            Err(GridError::DegenerateBranch { .. })
        ));
    }

    fn area(id: usize, bus_ids: &[usize]) -> Area {
        Area {
            id,
            name: format!("Area {id}"),
            bus_ids: bus_ids.iter().copied().collect(),
        }
    }

    fn transfer_bus(id: usize, area_id: usize) -> Bus {
        Bus {
            id,
            kind: BusKind::Transfer,
            area_id,
            voltage_magnitude: 1.0,
            voltage_angle: 0.0,
            p_injection: 0.0,
            q_injection: 0.0,
            v_min: 0.95,
            v_max: 1.05,
        }
    }

    fn tie(from: usize, to: usize) -> Branch {
        Branch {
            from_bus: from,
            to_bus: to,
            series_impedance: Complex64::new(0.05, 0.20),
            shunt_admittance: Complex64::new(0.0, 0.15),
            thermal_rating_p: 2.0,
            is_tie_line: true,
        }
    }

    fn multi_area_network(ties: &[(usize, usize)], n_areas: usize) -> Network {
        let buses: Vec<Bus> = (1..=n_areas).map(|a| transfer_bus(a, a)).collect();
        let areas: Vec<Area> = (1..=n_areas).map(|a| area(a, &[a])).collect();
        Network {
            buses,
            branches: ties.iter().map(|&(f, t)| tie(f, t)).collect(),
            sg_units: vec![],
            ibr_units: vec![],
            loads: BTreeMap::new(),
            areas,
            base_mva: BASE_MVA,
        }
    }

    #[test]
    fn hierarchy_three_areas_pairwise_tied() {
        let net = multi_area_network(&[(1, 2), (2, 3), (3, 1)], 3);
        let p = assign_hierarchies(&net, 1).unwrap();
        assert_eq!(p.levels.len(), 2);
        assert_eq!(p.levels[0], BTreeSet::from([1]));
        assert_eq!(p.levels[1], BTreeSet::from([2, 3]));
        assert!(p.excluded_areas.is_empty());
    }

    #[test]
    fn hierarchy_chain_bfs_depth() {
        let net = multi_area_network(&[(1, 2), (2, 3), (3, 4)], 4);
        let p = assign_hierarchies(&net, 2).unwrap();
        assert_eq!(p.levels.len(), 3);
        assert_eq!(p.levels[0], BTreeSet::from([2]));
        assert_eq!(p.levels[1], BTreeSet::from([1, 3]));
        assert_eq!(p.levels[2], BTreeSet::from([4]));
    }

    #[test]
    fn hierarchy_single_area() {
        let net = multi_area_network(&[], 1);
        let p = assign_hierarchies(&net, 1).unwrap();
        assert_eq!(p.levels.len(), 1);
        assert!(p.boundary_buses.is_empty());
        assert!(p.tie_lines.is_empty());
    }

    #[test]
    fn hierarchy_unreachable_area_excluded() {
        let net = multi_area_network(&[(1, 2)], 3);
        let p = assign_hierarchies(&net, 1).unwrap();
        assert_eq!(p.levels.len(), 2);
        assert_eq!(p.excluded_areas, BTreeSet::from([3]));
    }

    fn ibr(p_set: f64, q_set: f64, s_max: f64, q_max: f64) -> IbrUnit {
        IbrUnit {
            bus_id: 1,
            p_set,
            q_set,
            s_max,
            p_min: 0.0,
            p_max: s_max,
            q_min: -q_max,
            q_max,
            actuation_time_constant: 0.01,
        }
    }

    #[test]
    fn headroom_active() {
        let u = ibr(0.40, 0.0, 0.7548, 0.6);
        assert!((compute_headroom(&u, HeadroomMode::Active) - 0.3548).abs() < 1e-12);
        let saturated = ibr(0.7548, 0.0, 0.7548, 0.6);
        assert_eq!(compute_headroom(&saturated, HeadroomMode::Active), 0.0);
    }

    #[test]
    fn headroom_reactive_circle_constraint() {
        let u = ibr(0.60, 0.10, 0.7548, 0.60);
        // Hand computation: sqrt(0.7548^2 - 0.6^2) - 0.10.
        let expect = (0.7548f64.powi(2) - 0.36).sqrt() - 0.10;
        let h = compute_headroom(&u, HeadroomMode::Reactive);
        assert!((h - expect).abs() < 1e-12);
        assert!((h - 0.3580).abs() < 1e-4);
    }

    #[test]
    fn headroom_never_negative() {
        let u = ibr(0.7548, 0.0, 0.7548, 0.6);
        assert_eq!(compute_headroom(&u, HeadroomMode::Reactive), 0.0);
    }
}
