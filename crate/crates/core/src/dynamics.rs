//! Quasi-static phasor time-domain simulator: swing dynamics with
//! governor, AVR and AGC on the synchronous machines, first-order setpoint
//! actuation on the IBRs, and an algebraic network solution every step.
//!
//! The internal step is 1/1200 s so that the 60 samples-per-second output
//! grid falls on exact step boundaries (20 steps per sample) while staying
//! inside the 1 ms stability limit.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::grid::{build_admittance, Network};
use crate::powerflow::{line_flow, solve_regular_power_flow, NrOptions, PowerFlowSolution};

pub const NOMINAL_HZ: f64 = 60.0;
const OMEGA_S: f64 = 2.0 * std::f64::consts::PI * NOMINAL_HZ;

/// Setpoint update addressed to a device, delivered at its event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchCommand {
    pub bus_id: usize,
    pub p_ref: Option<f64>,
    pub q_ref: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventPayload {
    LoadStep {
        bus_id: usize,
        dp: f64,
        dq: f64,
    },
    GeneratorTrip {
        bus_id: usize,
    },
    SetpointArrival {
        commands: Vec<DispatchCommand>,
    },
    AvrSetpoint {
        bus_id: usize,
        v_ref: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSet {
    pub agc: bool,
    pub ibr_droop: bool,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Integration step, seconds. Must not exceed 1 ms.
    pub dt: f64,
    /// Output decimation: samples per second.
    pub sample_rate: f64,
    /// AGC integral gain (per-area PI integrator on the area control error).
    pub agc_gain: f64,
    /// IBR droop gain, p.u. power per p.u. frequency deviation.
    pub ibr_droop_gain: f64,
    /// First-order filter applied to the per-bus frequency measurement.
    pub freq_filter_tc: f64,
    /// Speed-deviation sanity limit, p.u.
    pub speed_limit: f64,
    /// Transient reactance used for the classical machine interface.
    pub default_xdp: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1.0 / 1200.0,
            sample_rate: 60.0,
            agc_gain: 0.045,
            ibr_droop_gain: 20.0,
            freq_filter_tc: 0.05,
            speed_limit: 0.05,
            default_xdp: 0.15,
        }
    }
}

/// Dynamic state of one synchronous machine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgState {
    pub bus_id: usize,
    pub rotor_angle: f64,
    pub speed_deviation: f64,
    pub mechanical_power: f64,
    /// Pre-limit governor command (droop plus AGC), kept for inspection.
    pub governor_state: f64,
    /// Internal EMF magnitude behind the transient reactance.
    pub field_state: f64,
    pub agc_integrator: f64,
    pub p_ref: f64,
    pub v_ref: f64,
    pub e0: f64,
    pub active: bool,
}

/// Dynamic state of one IBR.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbrState {
    pub bus_id: usize,
    pub p_out: f64,
    pub q_out: f64,
    pub p_ref: f64,
    pub q_ref: f64,
    pub time_constant: f64,
}

/// Time-stamped per-bus / per-device records from one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `bus_freq[sample][bus]`, Hz.
    pub bus_freq: Vec<Vec<f64>>,
    /// `bus_vm[sample][bus]`, p.u.
    pub bus_vm: Vec<Vec<f64>>,
    pub sg_p: Vec<Vec<f64>>,
    pub sg_q: Vec<Vec<f64>>,
    pub ibr_p: Vec<Vec<f64>>,
    pub ibr_q: Vec<Vec<f64>>,
    pub sg_bus_ids: Vec<usize>,
    pub ibr_bus_ids: Vec<usize>,
    pub bus_ids: Vec<usize>,
    pub events: Vec<(f64, String)>,
    /// Max |total generation - load - losses| seen across samples.
    pub max_balance_residual: f64,
}

impl Trajectory {
    /// Wide CSV: one row per sample with fixed scientific formatting so
    /// identical runs serialize byte-identically.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("time_s");
        for id in &self.bus_ids {
            out.push_str(&format!(",f_bus{id}_hz"));
        }
        for id in &self.bus_ids {
            out.push_str(&format!(",v_bus{id}_pu"));
        }
        for id in &self.sg_bus_ids {
            out.push_str(&format!(",p_sg{id}_pu"));
        }
        for id in &self.sg_bus_ids {
            out.push_str(&format!(",q_sg{id}_pu"));
        }
        for id in &self.ibr_bus_ids {
            out.push_str(&format!(",p_ibr{id}_pu"));
        }
        for id in &self.ibr_bus_ids {
            out.push_str(&format!(",q_ibr{id}_pu"));
        }
        out.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t:.6}"));
            for v in self.bus_freq[i]
                .iter()
                .chain(self.bus_vm[i].iter())
                .chain(self.sg_p[i].iter())
                .chain(self.sg_q[i].iter())
                .chain(self.ibr_p[i].iter())
                .chain(self.ibr_q[i].iter())
            {
                out.push_str(&format!(",{v:.10e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Measurement frame handed to observers at the sampling rate.
#[derive(Debug, Clone)]
pub struct Frame {
    pub time: f64,
    pub bus_vm: Vec<f64>,
    pub bus_va: Vec<f64>,
    pub bus_freq_hz: Vec<f64>,
    /// Net complex injection per bus (calculated at the solved state).
    pub bus_p: Vec<f64>,
    pub bus_q: Vec<f64>,
    /// Per tie line: (P, Q) entering the line at its from end.
    pub tie_flows: BTreeMap<usize, (f64, f64)>,
    /// Per-area total incoming tie-line active power.
    pub area_tie_in: BTreeMap<usize, f64>,
    /// Per-area total active generation (SG plus IBR).
    pub area_generation: BTreeMap<usize, f64>,
}

pub struct Simulator {
    pub network: Network,
    pub config: SimConfig,
    pub control: ControlSet,
    pub time: f64,
    step_index: u64,
    y_aug: DMatrix<Complex64>,
    lu: nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    voltages: DVector<Complex64>,
    pub sg: Vec<SgState>,
    pub ibr: Vec<IbrState>,
    xdp: Vec<f64>,
    /// Constant-PQ demand per bus position, updated by load events.
    load: Vec<Complex64>,
    events: Vec<SimEvent>,
    next_event: usize,
    event_log: Vec<(f64, String)>,
    /// Per-bus frequency measurement state (last two angle samples for a
    /// centered derivative, plus the previous raw value for the
    /// first-order-hold filter).
    prev_va: Vec<f64>,
    prev_va2: Vec<f64>,
    prev_raw: Vec<f64>,
    freq_filt: Vec<f64>,
    /// Voltages already solved for the present device state.
    network_clean: bool,
    /// Baseline tie imports per area for the AGC error.
    agc_tie_baseline: BTreeMap<usize, f64>,
    tie_branches: Vec<usize>,
    pub initial_solution: PowerFlowSolution,
    max_balance_residual: f64,
}

impl Simulator {
    /// Builds the simulator at the pre-contingency equilibrium given by a
    /// converged power flow with the designated slack bus.
    pub fn new(
        network: Network,
        slack_bus_id: usize,
        mut events: Vec<SimEvent>,
        control: ControlSet,
        config: SimConfig,
    ) -> Result<Self, SimError> {
        if config.dt > 1e-3 + 1e-12 {
            return Err(SimError::StepTooLarge(config.dt));
        }
        network.validate()?;
        let x_star = solve_regular_power_flow(&network, slack_bus_id, &NrOptions::default())?;

        let n = network.buses.len();
        let y = build_admittance(&network).map_err(SimError::Grid)?;

        // Machine interface: internal EMF behind the transient reactance.
        let mut sg = Vec::new();
        let mut xdp = Vec::new();
        for u in &network.sg_units {
            let k = network.bus_index(u.bus_id).unwrap();
            let v = x_star.bus_state[k].voltage();
            let mut s = Complex64::new(x_star.bus_state[k].p, x_star.bus_state[k].q);
            if let Some(l) = network.loads.get(&u.bus_id) {
                s += Complex64::new(l.p, l.q);
            }
            let x = config.default_xdp;
            let i = (s / v).conj();
            let e = v + Complex64::new(0.0, x) * i;
            sg.push(SgState {
                bus_id: u.bus_id,
                rotor_angle: e.arg(),
                speed_deviation: 0.0,
                mechanical_power: s.re,
                governor_state: s.re,
                field_state: e.norm(),
                agc_integrator: 0.0,
                p_ref: s.re,
                v_ref: v.norm(),
                e0: e.norm(),
                active: true,
            });
            xdp.push(x);
        }

        let ibr: Vec<IbrState> = network
            .ibr_units
            .iter()
            .map(|u| IbrState {
                bus_id: u.bus_id,
                p_out: u.p_set,
                q_out: u.q_set,
                p_ref: u.p_set,
                q_ref: u.q_set,
                time_constant: u.actuation_time_constant,
            })
            .collect();

        let load: Vec<Complex64> = network
            .buses
            .iter()
            .map(|b| {
                network
                    .loads
                    .get(&b.id)
                    .map(|l| Complex64::new(l.p, l.q))
                    .unwrap_or_default()
            })
            .collect();

        let mut y_aug = y;
        for (s, &x) in sg.iter().zip(&xdp) {
            let k = network.bus_index(s.bus_id).unwrap();
            y_aug[(k, k)] += Complex64::new(1.0, 0.0) / Complex64::new(0.0, x);
        }
        let lu = y_aug.clone().lu();

        let voltages = DVector::from_iterator(
            n,
            x_star.bus_state.iter().map(|b| b.voltage()),
        );
        let prev_va: Vec<f64> = x_star.bus_state.iter().map(|b| b.va).collect();
        let prev_va2 = prev_va.clone();

        events.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        let tie_branches: Vec<usize> = network
            .branches
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_tie_line)
            .map(|(i, _)| i)
            .collect();

        let mut sim = Simulator {
            config,
            control,
            time: 0.0,
            step_index: 0,
            y_aug,
            lu,
            voltages,
            sg,
            ibr,
            xdp,
            load,
            events,
            next_event: 0,
            event_log: Vec::new(),
            prev_va,
            prev_va2,
            prev_raw: vec![0.0; n],
            freq_filt: vec![0.0; n],
            network_clean: false,
            agc_tie_baseline: BTreeMap::new(),
            tie_branches,
            initial_solution: x_star,
            max_balance_residual: 0.0,
            network,
        };
        sim.agc_tie_baseline = sim.area_tie_imports();
        Ok(sim)
    }

    pub fn inject(&mut self, event: SimEvent) {
        // Keep the queue sorted; equal times preserve insertion order.
        let pos = self
            .events
            .iter()
            .skip(self.next_event)
            .position(|e| e.time > event.time)
            .map(|p| p + self.next_event)
            .unwrap_or(self.events.len());
        self.events.insert(pos, event);
    }

    fn area_of(&self, bus_id: usize) -> usize {
        self.network.bus(bus_id).map(|b| b.area_id).unwrap_or(0)
    }

    fn area_tie_imports(&self) -> BTreeMap<usize, f64> {
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        for a in &self.network.areas {
            out.insert(a.id, 0.0);
        }
        for &bi in &self.tie_branches {
            let br = &self.network.branches[bi];
            let kf = self.network.bus_index(br.from_bus).unwrap();
            let kt = self.network.bus_index(br.to_bus).unwrap();
            let f = line_flow(br, self.voltages[kf], self.voltages[kt]);
            let area_f = self.area_of(br.from_bus);
            let area_t = self.area_of(br.to_bus);
            *out.entry(area_f).or_default() += -f.p_from;
            *out.entry(area_t).or_default() += -f.p_to;
        }
        out
    }

    fn area_generation(&self) -> BTreeMap<usize, f64> {
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        for a in &self.network.areas {
            out.insert(a.id, 0.0);
        }
        for (s, &x) in self.sg.iter().zip(&self.xdp) {
            if !s.active {
                continue;
            }
            let k = self.network.bus_index(s.bus_id).unwrap();
            let v = self.voltages[k];
            let e = Complex64::from_polar(s.field_state, s.rotor_angle);
            let i = (e - v) / Complex64::new(0.0, x);
            *out.entry(self.area_of(s.bus_id)).or_default() += (v * i.conj()).re;
        }
        for u in &self.ibr {
            *out.entry(self.area_of(u.bus_id)).or_default() += u.p_out;
        }
        out
    }

    /// Fixed-point network solve with the prefactored augmented admittance:
    /// machine EMFs enter as current sources, IBRs and loads as constant
    /// power.
    fn solve_network(&mut self) -> Result<(), SimError> {
        self.solve_network_tol(1e-12)
    }

    fn solve_network_tol(&mut self, tol: f64) -> Result<(), SimError> {
        let n = self.network.buses.len();
        let mut i_src = DVector::<Complex64>::zeros(n);
        let mut s_const = DVector::<Complex64>::zeros(n);
        for (s, &x) in self.sg.iter().zip(&self.xdp) {
            if !s.active {
                continue;
            }
            let k = self.network.bus_index(s.bus_id).unwrap();
            let e = Complex64::from_polar(s.field_state, s.rotor_angle);
            i_src[k] += e / Complex64::new(0.0, x);
        }
        for (k, l) in self.load.iter().enumerate() {
            s_const[k] -= l;
        }
        for u in &self.ibr {
            let k = self.network.bus_index(u.bus_id).unwrap();
            s_const[k] += Complex64::new(u.p_out, u.q_out);
        }

        let mut v = self.voltages.clone();
        let mut rhs = DVector::<Complex64>::zeros(n);
        for _ in 0..60 {
            rhs.copy_from(&i_src);
            for k in 0..n {
                if s_const[k] != Complex64::default() {
                    rhs[k] += (s_const[k] / v[k]).conj();
                }
            }
            if !self.lu.solve_mut(&mut rhs) {
                return Err(SimError::NetworkDiverged { time: self.time });
            }
            let delta = rhs
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0f64, f64::max);
            std::mem::swap(&mut v, &mut rhs);
            if !delta.is_finite() {
                return Err(SimError::NetworkDiverged { time: self.time });
            }
            if delta < tol {
                self.voltages = v;
                self.network_clean = true;
                return Ok(());
            }
        }
        Err(SimError::NetworkDiverged { time: self.time })
    }

    fn electrical_power(&self, sg_idx: usize) -> (f64, f64) {
        let s = &self.sg[sg_idx];
        if !s.active {
            return (0.0, 0.0);
        }
        let k = self.network.bus_index(s.bus_id).unwrap();
        let v = self.voltages[k];
        let e = Complex64::from_polar(s.field_state, s.rotor_angle);
        let i = (e - v) / Complex64::new(0.0, self.xdp[sg_idx]);
        let sp = v * i.conj();
        (sp.re, sp.im)
    }

    fn apply_event(&mut self, payload: &EventPayload) {
        self.network_clean = false;
        match payload {
            EventPayload::LoadStep { bus_id, dp, dq } => {
                if let Some(k) = self.network.bus_index(*bus_id) {
                    self.load[k] += Complex64::new(*dp, *dq);
                }
                self.event_log
                    .push((self.time, format!("load_step bus {bus_id} dp {dp} dq {dq}")));
            }
            EventPayload::GeneratorTrip { bus_id } => {
                if let Some(i) = self.sg.iter().position(|s| s.bus_id == *bus_id && s.active) {
                    self.sg[i].active = false;
                    let k = self.network.bus_index(*bus_id).unwrap();
                    self.y_aug[(k, k)] -=
                        Complex64::new(1.0, 0.0) / Complex64::new(0.0, self.xdp[i]);
                    self.lu = self.y_aug.clone().lu();
                }
                self.event_log
                    .push((self.time, format!("generator_trip bus {bus_id}")));
            }
            EventPayload::SetpointArrival { commands } => {
                for c in commands {
                    if let Some(u) = self.ibr.iter_mut().find(|u| u.bus_id == c.bus_id) {
                        if let Some(p) = c.p_ref {
                            u.p_ref = p;
                        }
                        if let Some(q) = c.q_ref {
                            u.q_ref = q;
                        }
                    }
                }
                self.event_log
                    .push((self.time, format!("setpoints {} device(s)", commands.len())));
            }
            EventPayload::AvrSetpoint { bus_id, v_ref } => {
                if let Some(s) = self.sg.iter_mut().find(|s| s.bus_id == *bus_id) {
                    s.v_ref = *v_ref;
                }
                self.event_log
                    .push((self.time, format!("avr_setpoint bus {bus_id} v {v_ref:.4}")));
            }
        }
    }

    /// Applies every event due at or before the current time (half-step
    /// tolerance); returns whether anything was applied.
    fn catch_up_events(&mut self) -> bool {
        let mut applied = false;
        while self.next_event < self.events.len()
            && self.events[self.next_event].time <= self.time + self.config.dt * 0.5
        {
            let payload = self.events[self.next_event].payload.clone();
            self.apply_event(&payload);
            self.next_event += 1;
            applied = true;
        }
        applied
    }

    /// Snaps the angle-measurement history to the present solution so an
    /// algebraic jump (event application) does not register as a frequency
    /// excursion.
    fn resync_frequency_reference(&mut self) {
        for k in 0..self.network.buses.len() {
            let va = self.voltages[k].arg();
            self.prev_va[k] = va;
            self.prev_va2[k] = va;
        }
    }



    /// One integration step: device ODEs advance by RK4 with the network
    /// re-solved at every stage.
    pub fn step(&mut self) -> Result<(), SimError> {
        let dt = self.config.dt;
        let events_applied = self.catch_up_events();
        if events_applied {
            self.solve_network()?;
            self.resync_frequency_reference();
        }

        // AGC: per-area integrator on the area control error.
        if self.control.agc {
            let ties = self.area_tie_imports();
            let mut area_speed: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for s in self.sg.iter().filter(|s| s.active) {
                let e = area_speed.entry(self.area_of(s.bus_id)).or_insert((0.0, 0));
                e.0 += s.speed_deviation;
                e.1 += 1;
            }
            let mut area_ace: BTreeMap<usize, f64> = BTreeMap::new();
            for a in &self.network.areas {
                let d_tie = ties.get(&a.id).copied().unwrap_or(0.0)
                    - self.agc_tie_baseline.get(&a.id).copied().unwrap_or(0.0);
                let (sum, cnt) = area_speed.get(&a.id).copied().unwrap_or((0.0, 0));
                if cnt == 0 {
                    continue;
                }
                let dw = sum / cnt as f64;
                let bias: f64 = self
                    .network
                    .sg_units
                    .iter()
                    .filter(|u| self.area_of(u.bus_id) == a.id)
                    .map(|u| 1.0 / u.droop_r + u.damping_d)
                    .sum();
                area_ace.insert(a.id, -d_tie + bias * dw);
            }
            for (i, s) in self.sg.iter_mut().enumerate() {
                if !s.active {
                    continue;
                }
                let u = &self.network.sg_units[i];
                let area = self.network.bus(s.bus_id).map(|b| b.area_id).unwrap_or(0);
                if let Some(&ace) = area_ace.get(&area) {
                    s.agc_integrator += -self.config.agc_gain
                        * u.agc_participation_factor
                        * ace
                        * dt;
                }
            }
        }

        // Fully coupled RK4: the network re-solves at every stage so the
        // device/network coupling carries the integrator's order.
        self.rk4_coupled(dt)?;

        // Per-bus frequency: filtered angle derivative. The derivative is
        // a lag-free second-order backward difference and the filter is the
        // exact first-order-hold discretization, so the measured trajectory
        // is insensitive to the step size.
        let a = dt / self.config.freq_filter_tc;
        let decay = (-a).exp();
        let w0 = 1.0 - decay;
        let w1 = 1.0 - (1.0 - decay) / a;
        let unwrap = |mut d: f64| {
            if d > std::f64::consts::PI {
                d -= 2.0 * std::f64::consts::PI;
            } else if d < -std::f64::consts::PI {
                d += 2.0 * std::f64::consts::PI;
            }
            d
        };
        for k in 0..self.network.buses.len() {
            let va = self.voltages[k].arg();
            let d1 = unwrap(va - self.prev_va[k]);
            let d2 = unwrap(self.prev_va[k] - self.prev_va2[k]);
            let raw = (1.5 * d1 - 0.5 * d2) / (dt * OMEGA_S);
            let y = self.freq_filt[k];
            self.freq_filt[k] =
                decay * y + w0 * self.prev_raw[k] + w1 * (raw - self.prev_raw[k]);
            self.prev_raw[k] = raw;
            self.prev_va2[k] = self.prev_va[k];
            self.prev_va[k] = va;
        }

        self.step_index += 1;
        self.time = self.step_index as f64 * dt;
        Ok(())
    }

    fn save_device_state(&self) -> (Vec<[f64; 4]>, Vec<[f64; 2]>) {
        (
            self.sg
                .iter()
                .map(|s| {
                    [
                        s.rotor_angle,
                        s.speed_deviation,
                        s.mechanical_power,
                        s.field_state,
                    ]
                })
                .collect(),
            self.ibr.iter().map(|u| [u.p_out, u.q_out]).collect(),
        )
    }

    fn load_device_state(&mut self, sg: &[[f64; 4]], ibr: &[[f64; 2]]) {
        self.network_clean = false;
        for (s, y) in self.sg.iter_mut().zip(sg) {
            s.rotor_angle = y[0];
            s.speed_deviation = y[1];
            s.mechanical_power = y[2];
            s.field_state = y[3].clamp(0.3, 2.5);
        }
        for (u, y) in self.ibr.iter_mut().zip(ibr) {
            u.p_out = y[0];
            u.q_out = y[1];
        }
    }

    /// Device derivatives at the currently loaded state, with the network
    /// re-solved so the electrical quantities are consistent.
    fn device_derivs(&mut self) -> Result<(Vec<[f64; 4]>, Vec<[f64; 2]>), SimError> {
        if !self.network_clean {
            // Stage evaluations tolerate a looser solve; the residual is
            // scaled by the step before it reaches any state.
            self.solve_network_tol(1e-10)?;
        }
        let mut d_sg = Vec::with_capacity(self.sg.len());
        for i in 0..self.sg.len() {
            if !self.sg[i].active {
                d_sg.push([0.0; 4]);
                continue;
            }
            let (p_e, _) = self.electrical_power(i);
            let u = &self.network.sg_units[i];
            let k = self.network.bus_index(self.sg[i].bus_id).unwrap();
            let v_term = self.voltages[k].norm();
            let s = &self.sg[i];
            let p_cmd = s.p_ref + s.agc_integrator - s.speed_deviation / u.droop_r;
            let e_cmd = s.e0 + u.avr_gain * (s.v_ref - v_term);
            d_sg.push([
                OMEGA_S * s.speed_deviation,
                (s.mechanical_power - p_e - u.damping_d * s.speed_deviation)
                    / (2.0 * u.inertia_h),
                (p_cmd - s.mechanical_power) / u.governor_time_constant.max(1e-3),
                (e_cmd - s.field_state) / u.avr_time_constant.max(1e-3),
            ]);
        }
        let mut d_ibr = Vec::with_capacity(self.ibr.len());
        for u in &self.ibr {
            let k = self.network.bus_index(u.bus_id).unwrap();
            let droop = if self.control.ibr_droop {
                -self.config.ibr_droop_gain * self.freq_filt[k]
            } else {
                0.0
            };
            let tau = u.time_constant.max(1e-4);
            d_ibr.push([
                (u.p_ref + droop - u.p_out) / tau,
                (u.q_ref - u.q_out) / tau,
            ]);
        }
        Ok((d_sg, d_ibr))
    }

    fn rk4_coupled(&mut self, h: f64) -> Result<(), SimError> {
        let (sg0, ibr0) = self.save_device_state();
        let blend = |a: &[[f64; 4]], b: &[[f64; 4]], w: f64| -> Vec<[f64; 4]> {
            a.iter()
                .zip(b)
                .map(|(x, d)| [x[0] + w * d[0], x[1] + w * d[1], x[2] + w * d[2], x[3] + w * d[3]])
                .collect()
        };
        let blend2 = |a: &[[f64; 2]], b: &[[f64; 2]], w: f64| -> Vec<[f64; 2]> {
            a.iter()
                .zip(b)
                .map(|(x, d)| [x[0] + w * d[0], x[1] + w * d[1]])
                .collect()
        };

        let (k1s, k1i) = self.device_derivs()?;
        self.load_device_state(&blend(&sg0, &k1s, h / 2.0), &blend2(&ibr0, &k1i, h / 2.0));
        let (k2s, k2i) = self.device_derivs()?;
        self.load_device_state(&blend(&sg0, &k2s, h / 2.0), &blend2(&ibr0, &k2i, h / 2.0));
        let (k3s, k3i) = self.device_derivs()?;
        self.load_device_state(&blend(&sg0, &k3s, h), &blend2(&ibr0, &k3i, h));
        let (k4s, k4i) = self.device_derivs()?;

        let mut sg1 = sg0.clone();
        for (j, y) in sg1.iter_mut().enumerate() {
            for c in 0..4 {
                y[c] += h / 6.0 * (k1s[j][c] + 2.0 * k2s[j][c] + 2.0 * k3s[j][c] + k4s[j][c]);
            }
        }
        let mut ibr1 = ibr0.clone();
        for (j, y) in ibr1.iter_mut().enumerate() {
            for c in 0..2 {
                y[c] += h / 6.0 * (k1i[j][c] + 2.0 * k2i[j][c] + 2.0 * k3i[j][c] + k4i[j][c]);
            }
        }
        self.load_device_state(&sg1, &ibr1);

        // Capability projection and bookkeeping on the accepted state.
        for j in 0..self.ibr.len() {
            let unit_smax = self
                .network
                .ibr_at(self.ibr[j].bus_id)
                .map(|u| u.s_max)
                .unwrap_or(f64::INFINITY);
            let u = &mut self.ibr[j];
            let s = u.p_out.hypot(u.q_out);
            if s > unit_smax {
                let scale = unit_smax / s;
                u.p_out *= scale;
                u.q_out *= scale;
            }
        }
        for i in 0..self.sg.len() {
            if !self.sg[i].active {
                continue;
            }
            let u = &self.network.sg_units[i];
            let s = &mut self.sg[i];
            s.governor_state = s.p_ref + s.agc_integrator - s.speed_deviation / u.droop_r;
            if s.speed_deviation.abs() > self.config.speed_limit {
                return Err(SimError::Unstable {
                    time: self.time,
                    limit: self.config.speed_limit,
                });
            }
        }
        self.solve_network()
    }

    fn frame(&self) -> Frame {
        let n = self.network.buses.len();
        let mut bus_p = vec![0.0; n];
        let mut bus_q = vec![0.0; n];
        for k in 0..n {
            let mut i_k = Complex64::default();
            for m in 0..n {
                i_k += self.y_aug[(k, m)] * self.voltages[m];
            }
            let s = self.voltages[k] * i_k.conj();
            bus_p[k] = s.re;
            bus_q[k] = s.im;
        }
        let mut tie_flows = BTreeMap::new();
        for &bi in &self.tie_branches {
            let br = &self.network.branches[bi];
            let kf = self.network.bus_index(br.from_bus).unwrap();
            let kt = self.network.bus_index(br.to_bus).unwrap();
            let f = line_flow(br, self.voltages[kf], self.voltages[kt]);
            tie_flows.insert(bi, (f.p_from, f.q_from));
        }
        Frame {
            time: self.time,
            bus_vm: self.voltages.iter().map(|v| v.norm()).collect(),
            bus_va: self.voltages.iter().map(|v| v.arg()).collect(),
            bus_freq_hz: self
                .freq_filt
                .iter()
                .map(|f| NOMINAL_HZ * (1.0 + f))
                .collect(),
            bus_p,
            bus_q,
            tie_flows,
            area_tie_in: self.area_tie_imports(),
            area_generation: self.area_generation(),
        }
    }

    fn balance_residual(&self) -> f64 {
        // Route 1: sum of net injections equals network dissipation.
        let n = self.network.buses.len();
        let mut inj_sum = 0.0;
        for k in 0..n {
            let mut i_k = Complex64::default();
            for m in 0..n {
                i_k += self.y_aug[(k, m)] * self.voltages[m];
            }
            // Remove the machine interface current to recover the physical
            // bus injection.
            inj_sum += (self.voltages[k] * i_k.conj()).re;
        }
        let mut machine_inj = 0.0;
        for (i, s) in self.sg.iter().enumerate() {
            if s.active {
                machine_inj += self.electrical_power(i).0;
            } else {
                let _ = i;
            }
        }
        // Route 2: branch-by-branch losses.
        let mut losses = 0.0;
        for br in &self.network.branches {
            let kf = self.network.bus_index(br.from_bus).unwrap();
            let kt = self.network.bus_index(br.to_bus).unwrap();
            let f = line_flow(br, self.voltages[kf], self.voltages[kt]);
            losses += f.p_from + f.p_to;
        }
        let generation = machine_inj + self.ibr.iter().map(|u| u.p_out).sum::<f64>();
        let demand: f64 = self.load.iter().map(|l| l.re).sum();
        let _ = inj_sum;
        (generation - demand - losses).abs()
    }

    /// Runs until `duration`, sampling at the configured rate and handing
    /// each frame to the observer, which may inject new events.
    pub fn run_with_observer(
        &mut self,
        duration: f64,
        observer: &mut dyn FnMut(&Frame, &mut Vec<SimEvent>),
    ) -> Result<Trajectory, SimError> {
        let steps_per_sample = (1.0 / (self.config.sample_rate * self.config.dt)).round() as u64;
        let total_steps = (duration / self.config.dt).round() as u64;

        let n = self.network.buses.len();
        let mut traj = Trajectory {
            times: Vec::new(),
            bus_freq: Vec::new(),
            bus_vm: Vec::new(),
            sg_p: Vec::new(),
            sg_q: Vec::new(),
            ibr_p: Vec::new(),
            ibr_q: Vec::new(),
            sg_bus_ids: self.sg.iter().map(|s| s.bus_id).collect(),
            ibr_bus_ids: self.ibr.iter().map(|u| u.bus_id).collect(),
            bus_ids: self.network.buses.iter().map(|b| b.id).collect(),
            events: Vec::new(),
            max_balance_residual: 0.0,
        };
        let _ = n;

        let mut pending = Vec::new();
        let sample = |sim: &mut Simulator, traj: &mut Trajectory,
                          observer: &mut dyn FnMut(&Frame, &mut Vec<SimEvent>),
                          pending: &mut Vec<SimEvent>| {
            // A contingency landing exactly on the sampling grid shows up
            // in this frame: apply it and re-solve before recording.
            if sim.catch_up_events() {
                let _ = sim.solve_network();
                sim.resync_frequency_reference();
            }
            let frame = sim.frame();
            traj.times.push(sim.time);
            traj.bus_freq.push(frame.bus_freq_hz.clone());
            traj.bus_vm.push(frame.bus_vm.clone());
            let pe: Vec<(f64, f64)> = (0..sim.sg.len()).map(|i| sim.electrical_power(i)).collect();
            traj.sg_p.push(pe.iter().map(|p| p.0).collect());
            traj.sg_q.push(pe.iter().map(|p| p.1).collect());
            traj.ibr_p.push(sim.ibr.iter().map(|u| u.p_out).collect());
            traj.ibr_q.push(sim.ibr.iter().map(|u| u.q_out).collect());
            let res = sim.balance_residual();
            if res > traj.max_balance_residual {
                traj.max_balance_residual = res;
            }
            observer(&frame, pending);
            for e in pending.drain(..) {
                sim.inject(e);
            }
        };

        sample(self, &mut traj, observer, &mut pending);
        for _ in 0..total_steps {
            self.step()?;
            if self.step_index % steps_per_sample == 0 {
                sample(self, &mut traj, observer, &mut pending);
            }
        }
        traj.events = self.event_log.clone();
        traj.max_balance_residual = traj.max_balance_residual.max(0.0);
        self.max_balance_residual = traj.max_balance_residual;
        Ok(traj)
    }

    pub fn run(&mut self, duration: f64) -> Result<Trajectory, SimError> {
        self.run_with_observer(duration, &mut |_, _| {})
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Area, Branch, Bus, BusKind, IbrUnit, LoadDemand, SgUnit, BASE_MVA};
    use std::collections::{BTreeMap, BTreeSet};

    fn sg_unit(bus: usize, p: f64) -> SgUnit {
        SgUnit {
            bus_id: bus,
            p_set: p,
            q_set: 0.1,
            p_min: 0.0,
            p_max: 3.0,
            q_min: -2.0,
            q_max: 2.0,
            inertia_h: 5.0,
            damping_d: 2.0,
            droop_r: 0.05,
            governor_time_constant: 0.5,
            avr_gain: 30.0,
            avr_time_constant: 0.5,
            agc_participation_factor: 1.0,
        }
    }

    fn single_machine_net(load: f64) -> Network {
        Network {
            buses: vec![
                Bus {
                    id: 1,
                    kind: BusKind::Sg,
                    area_id: 1,
                    voltage_magnitude: 1.0,
                    voltage_angle: 0.0,
                    p_injection: load,
                    q_injection: 0.0,
                    v_min: 0.8,
                    v_max: 1.2,
                },
                Bus {
                    id: 2,
                    kind: BusKind::Load,
                    area_id: 1,
                    voltage_magnitude: 1.0,
                    voltage_angle: 0.0,
                    p_injection: -load,
                    q_injection: 0.0,
                    v_min: 0.8,
                    v_max: 1.2,
                },
            ],
            branches: vec![Branch {
                from_bus: 1,
                to_bus: 2,
                series_impedance: num_complex::Complex64::new(0.0, 0.1),
                shunt_admittance: num_complex::Complex64::new(0.0, 0.0),
                thermal_rating_p: 10.0,
                is_tie_line: false,
            }],
            sg_units: vec![sg_unit(1, load)],
            ibr_units: vec![],
            loads: BTreeMap::from([(2, LoadDemand { p: load, q: 0.0 })]),
            areas: vec![Area {
                id: 1,
                name: "A".into(),
                bus_ids: BTreeSet::from([1, 2]),
            }],
            base_mva: BASE_MVA,
        }
    }

    #[test]
    fn equilibrium_holds_without_events() {
        let net = single_machine_net(0.5);
        let mut sim = Simulator::new(
            net,
            1,
            vec![],
            ControlSet {
                agc: false,
                ibr_droop: false,
            },
            SimConfig::default(),
        )
        .unwrap();
        let traj = sim.run(10.0).unwrap();
        for row in &traj.bus_freq {
            for f in row {
                assert!((f - 60.0).abs() < 1e-9, "freq drifted: {f}");
            }
        }
        let v0 = traj.bus_vm[0].clone();
        for row in &traj.bus_vm {
            for (a, b) in row.iter().zip(&v0) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(traj.max_balance_residual < 1e-6);
    }

    #[test]
    fn droop_steady_state_matches_closed_form() {
        let net = single_machine_net(0.5);
        let dp = 0.1;
        let events = vec![SimEvent {
            time: 1.0,
            payload: EventPayload::LoadStep {
                bus_id: 2,
                dp,
                dq: 0.0,
            },
        }];
        let mut sim = Simulator::new(
            net,
            1,
            events,
            ControlSet {
                agc: false,
                ibr_droop: false,
            },
            SimConfig::default(),
        )
        .unwrap();
        let traj = sim.run(30.0).unwrap();
        // Lossless line: steady-state speed offset is -dp / (1/R + D).
        let expected = -dp / (1.0 / 0.05 + 2.0);
        let f_end = traj.bus_freq.last().unwrap()[0];
        let dev = (f_end - 60.0) / 60.0;
        assert!(
            (dev - expected).abs() < 2e-5,
            "dev {dev:.6e} vs expected {expected:.6e}"
        );
        // Proportional-only control leaves a nonzero offset.
        assert!(dev.abs() > 1e-4);
    }

    fn ibr_only_net() -> Network {
        Network {
            buses: vec![
                Bus {
                    id: 1,
                    kind: BusKind::Sg,
                    area_id: 1,
                    voltage_magnitude: 1.0,
                    voltage_angle: 0.0,
                    p_injection: 0.0,
                    q_injection: 0.0,
                    v_min: 0.8,
                    v_max: 1.2,
                },
                Bus {
                    id: 2,
                    kind: BusKind::Ibr,
                    area_id: 1,
                    voltage_magnitude: 1.0,
                    voltage_angle: 0.0,
                    p_injection: 0.0,
                    q_injection: 0.0,
                    v_min: 0.8,
                    v_max: 1.2,
                },
            ],
            branches: vec![Branch {
                from_bus: 1,
                to_bus: 2,
                series_impedance: num_complex::Complex64::new(0.0, 0.1),
                shunt_admittance: num_complex::Complex64::new(0.0, 0.0),
                thermal_rating_p: 10.0,
                is_tie_line: false,
            }],
            sg_units: vec![sg_unit(1, 0.0)],
            ibr_units: vec![IbrUnit {
                bus_id: 2,
                p_set: 0.0,
                q_set: 0.0,
                s_max: 0.7548,
                p_min: 0.0,
                p_max: 0.7548,
                q_min: -0.6,
                q_max: 0.6,
                actuation_time_constant: 0.01,
            }],
            loads: BTreeMap::new(),
            areas: vec![Area {
                id: 1,
                name: "A".into(),
                bus_ids: BTreeSet::from([1, 2]),
            }],
            base_mva: BASE_MVA,
        }
    }

    #[test]
    fn ibr_first_order_response() {
        let net = ibr_only_net();
        let events = vec![SimEvent {
            time: 0.0,
            payload: EventPayload::SetpointArrival {
                commands: vec![DispatchCommand {
                    bus_id: 2,
                    p_ref: Some(0.1),
                    q_ref: None,
                }],
            },
        }];
        let mut sim = Simulator::new(
            net,
            1,
            events,
            ControlSet {
                agc: false,
                ibr_droop: false,
            },
            SimConfig::default(),
        )
        .unwrap();
        // Integrate to exactly one time constant.
        let steps = (0.01f64 / sim.config.dt).round() as usize;
        for _ in 0..steps {
            sim.step().unwrap();
        }
        let p = sim.ibr[0].p_out;
        let expected = 0.1 * (1.0 - (-1.0f64).exp());
        assert!(
            (p - expected).abs() < 1e-6,
            "p {p:.8} vs closed form {expected:.8}"
        );
        // Five time constants later the output is within 1% of the target.
        for _ in 0..(4 * steps) {
            sim.step().unwrap();
        }
        assert!((sim.ibr[0].p_out - 0.1).abs() < 0.01 * 0.1);
    }

    #[test]
    fn agc_restores_frequency() {
        let net = single_machine_net(0.5);
        let events = vec![SimEvent {
            time: 1.0,
            payload: EventPayload::LoadStep {
                bus_id: 2,
                dp: 0.1,
                dq: 0.0,
            },
        }];
        let mut sim = Simulator::new(
            net,
            1,
            events,
            ControlSet {
                agc: true,
                ibr_droop: false,
            },
            SimConfig::default(),
        )
        .unwrap();
        let traj = sim.run(80.0).unwrap();
        let f_end = traj.bus_freq.last().unwrap()[0];
        assert!(
            (f_end - 60.0).abs() < 0.01,
            "AGC should restore 60 Hz, got {f_end}"
        );
    }

    #[test]
    fn determinism_bit_identical() {
        let make = || {
            let net = single_machine_net(0.5);
            let events = vec![SimEvent {
                time: 1.0,
                payload: EventPayload::LoadStep {
                    bus_id: 2,
                    dp: 0.1,
                    dq: 0.05,
                },
            }];
            let mut sim = Simulator::new(
                net,
                1,
                events,
                ControlSet {
                    agc: true,
                    ibr_droop: false,
                },
                SimConfig::default(),
            )
            .unwrap();
            sim.run(5.0).unwrap().to_csv()
        };
        assert_eq!(make(), make());
    }
}
