//! Newton-Raphson power flow over per-bus variable masks.
//!
//! Every bus carries four quantities (|V|, theta, P, Q) of which exactly two
//! are fixed and two are free (the Newton unknowns / evaluated outputs).
//! This covers conventional PV/PQ/slack patterns as well as the staged
//! optimization masks, which pin different pairs per bus role.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::PowerFlowError;
use crate::grid::{Branch, BusKind, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    Vm,
    Va,
    P,
    Q,
}

/// Full state of one bus: voltage phasor in polar form plus net injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusVariables {
    pub vm: f64,
    pub va: f64,
    pub p: f64,
    pub q: f64,
}

impl BusVariables {
    pub fn voltage(&self) -> Complex64 {
        Complex64::from_polar(self.vm, self.va)
    }

    pub fn get(&self, q: Quantity) -> f64 {
        match q {
            Quantity::Vm => self.vm,
            Quantity::Va => self.va,
            Quantity::P => self.p,
            Quantity::Q => self.q,
        }
    }

    pub fn set(&mut self, q: Quantity, value: f64) {
        match q {
            Quantity::Vm => self.vm = value,
            Quantity::Va => self.va = value,
            Quantity::P => self.p = value,
            Quantity::Q => self.q = value,
        }
    }
}

/// Fixed/free flags for the four quantities of one bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub vm_fixed: bool,
    pub va_fixed: bool,
    pub p_fixed: bool,
    pub q_fixed: bool,
}

impl MaskEntry {
    /// Slack-style bus: voltage phasor fixed, injections solved.
    pub const VOLTAGE: MaskEntry = MaskEntry {
        vm_fixed: true,
        va_fixed: true,
        p_fixed: false,
        q_fixed: false,
    };
    /// PV bus: |V| and P fixed, angle and Q solved.
    pub const PV: MaskEntry = MaskEntry {
        vm_fixed: true,
        va_fixed: false,
        p_fixed: true,
        q_fixed: false,
    };
    /// PQ bus: injections fixed, voltage solved.
    pub const PQ: MaskEntry = MaskEntry {
        vm_fixed: false,
        va_fixed: false,
        p_fixed: true,
        q_fixed: true,
    };
    /// Angle and P fixed, |V| and Q solved.
    pub const THETA_P: MaskEntry = MaskEntry {
        vm_fixed: false,
        va_fixed: true,
        p_fixed: true,
        q_fixed: false,
    };

    pub fn fixed_count(&self) -> usize {
        usize::from(self.vm_fixed)
            + usize::from(self.va_fixed)
            + usize::from(self.p_fixed)
            + usize::from(self.q_fixed)
    }

    pub fn is_fixed(&self, q: Quantity) -> bool {
        match q {
            Quantity::Vm => self.vm_fixed,
            Quantity::Va => self.va_fixed,
            Quantity::P => self.p_fixed,
            Quantity::Q => self.q_fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMask {
    pub entries: Vec<MaskEntry>,
}

impl VariableMask {
    pub fn validate(&self) -> Result<(), PowerFlowError> {
        for (bus, e) in self.entries.iter().enumerate() {
            if e.fixed_count() != 2 {
                return Err(PowerFlowError::BadMask {
                    bus,
                    what: format!("{} quantities fixed, expected 2", e.fixed_count()),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub bus_state: Vec<BusVariables>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl PowerFlowSolution {
    pub fn voltages(&self) -> Vec<Complex64> {
        self.bus_state.iter().map(|b| b.voltage()).collect()
    }
}

/// Per-bus complex power-balance residual, no masking:
/// `residual_k = V_k * conj((Y V)_k) - (P_k + j Q_k)`.
pub fn mismatch(y: &DMatrix<Complex64>, state: &[BusVariables]) -> Vec<Complex64> {
    let n = state.len();
    assert_eq!(y.nrows(), n, "admittance dimension mismatch");
    let v: Vec<Complex64> = state.iter().map(|b| b.voltage()).collect();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut i_k = Complex64::new(0.0, 0.0);
        for m in 0..n {
            i_k += y[(k, m)] * v[m];
        }
        let s_calc = v[k] * i_k.conj();
        out.push(s_calc - Complex64::new(state[k].p, state[k].q));
    }
    out
}

/// Calculated complex injections `V ∘ conj(Y V)` for the given voltages.
pub fn calculated_injections(y: &DMatrix<Complex64>, state: &[BusVariables]) -> Vec<Complex64> {
    let n = state.len();
    let v: Vec<Complex64> = state.iter().map(|b| b.voltage()).collect();
    (0..n)
        .map(|k| {
            let mut i_k = Complex64::new(0.0, 0.0);
            for m in 0..n {
                i_k += y[(k, m)] * v[m];
            }
            v[k] * i_k.conj()
        })
        .collect()
}

/// Dense polar-form derivative blocks of the calculated injections.
///
/// Returns (dP/dVa, dP/dVm, dQ/dVa, dQ/dVm), each n x n.
pub fn injection_jacobian(
    y: &DMatrix<Complex64>,
    state: &[BusVariables],
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = state.len();
    let mut dp_dva = DMatrix::zeros(n, n);
    let mut dp_dvm = DMatrix::zeros(n, n);
    let mut dq_dva = DMatrix::zeros(n, n);
    let mut dq_dvm = DMatrix::zeros(n, n);

    // Precompute injections for the diagonal terms.
    let s_calc = calculated_injections(y, state);

    for k in 0..n {
        let vk = state[k].vm;
        let tk = state[k].va;
        let p_k = s_calc[k].re;
        let q_k = s_calc[k].im;
        let g_kk = y[(k, k)].re;
        let b_kk = y[(k, k)].im;
        for m in 0..n {
            if m == k {
                dp_dva[(k, k)] = -q_k - b_kk * vk * vk;
                dp_dvm[(k, k)] = p_k / vk + g_kk * vk;
                dq_dva[(k, k)] = p_k - g_kk * vk * vk;
                dq_dvm[(k, k)] = q_k / vk - b_kk * vk;
            } else {
                let g = y[(k, m)].re;
                let b = y[(k, m)].im;
                if g == 0.0 && b == 0.0 {
                    continue;
                }
                let vm_ = state[m].vm;
                let t_km = tk - state[m].va;
                let (s, c) = t_km.sin_cos();
                // Off-diagonal standard polar expressions.
                dp_dva[(k, m)] = vk * vm_ * (g * s - b * c);
                dp_dvm[(k, m)] = vk * (g * c + b * s);
                dq_dva[(k, m)] = -vk * vm_ * (g * c + b * s);
                dq_dvm[(k, m)] = vk * (g * s - b * c);
            }
        }
    }
    (dp_dva, dp_dvm, dq_dva, dq_dvm)
}

#[derive(Debug, Clone, Copy)]
pub struct NrOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Per-iteration caps on |V| and angle corrections, for robustness far
    /// from the solution.
    pub max_vm_step: f64,
    pub max_va_step: f64,
}

impl Default for NrOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
            max_vm_step: 0.25,
            max_va_step: 0.5,
        }
    }
}

/// Solves the masked power-flow equations: Newton on the free (Vm, Va)
/// entries against the balance equations of buses with fixed P and/or Q,
/// then evaluates the free injections so every bus balances.
pub fn solve_masked(
    y: &DMatrix<Complex64>,
    mask: &VariableMask,
    initial: &[BusVariables],
    opts: &NrOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = initial.len();
    if y.nrows() != n || mask.entries.len() != n {
        return Err(PowerFlowError::Dimension(format!(
            "buses {n}, admittance {}, mask {}",
            y.nrows(),
            mask.entries.len()
        )));
    }
    mask.validate()?;

    let mut state = initial.to_vec();

    // Unknown layout: all free angles first, then free magnitudes.
    let va_unknowns: Vec<usize> = (0..n).filter(|&k| !mask.entries[k].va_fixed).collect();
    let vm_unknowns: Vec<usize> = (0..n).filter(|&k| !mask.entries[k].vm_fixed).collect();
    // Equation layout: P rows at p-fixed buses, then Q rows at q-fixed buses.
    let p_rows: Vec<usize> = (0..n).filter(|&k| mask.entries[k].p_fixed).collect();
    let q_rows: Vec<usize> = (0..n).filter(|&k| mask.entries[k].q_fixed).collect();

    let n_unknowns = va_unknowns.len() + vm_unknowns.len();
    let n_equations = p_rows.len() + q_rows.len();
    if n_unknowns != n_equations {
        return Err(PowerFlowError::Dimension(format!(
            "{n_unknowns} unknowns vs {n_equations} balance equations"
        )));
    }

    let mut iterations = 0;
    loop {
        let s_calc = calculated_injections(y, &state);
        let mut f = DVector::<f64>::zeros(n_equations);
        for (r, &k) in p_rows.iter().enumerate() {
            f[r] = s_calc[k].re - state[k].p;
        }
        for (r, &k) in q_rows.iter().enumerate() {
            f[p_rows.len() + r] = s_calc[k].im - state[k].q;
        }
        let max_mismatch = f.iter().fold(0.0f64, |a, &x| a.max(x.abs()));

        if max_mismatch <= opts.tolerance {
            // Absorb the residual into the free injections so the full
            // mismatch vector vanishes.
            for k in 0..n {
                if !mask.entries[k].p_fixed {
                    state[k].p = s_calc[k].re;
                }
                if !mask.entries[k].q_fixed {
                    state[k].q = s_calc[k].im;
                }
            }
            return Ok(PowerFlowSolution {
                bus_state: state,
                converged: true,
                iterations,
                max_mismatch,
            });
        }
        if iterations >= opts.max_iterations || !max_mismatch.is_finite() {
            let mut last = state.clone();
            let s_last = calculated_injections(y, &last);
            for k in 0..n {
                if !mask.entries[k].p_fixed {
                    last[k].p = s_last[k].re;
                }
                if !mask.entries[k].q_fixed {
                    last[k].q = s_last[k].im;
                }
            }
            return Err(PowerFlowError::Diverged {
                iterations,
                max_mismatch,
                last: Box::new(PowerFlowSolution {
                    bus_state: last,
                    converged: false,
                    iterations,
                    max_mismatch,
                }),
            });
        }

        if n_unknowns == 0 {
            // Nothing to correct and the residual did not meet tolerance.
            return Err(PowerFlowError::Diverged {
                iterations,
                max_mismatch,
                last: Box::new(PowerFlowSolution {
                    bus_state: state.clone(),
                    converged: false,
                    iterations,
                    max_mismatch,
                }),
            });
        }

        let (dp_dva, dp_dvm, dq_dva, dq_dvm) = injection_jacobian(y, &state);
        let mut jac = DMatrix::<f64>::zeros(n_equations, n_unknowns);
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
        let dx = lu
            .solve(&(-f))
            .ok_or(PowerFlowError::SingularJacobian { iteration: iterations })?;

        for (c, &k) in va_unknowns.iter().enumerate() {
            let step = dx[c].clamp(-opts.max_va_step, opts.max_va_step);
            state[k].va += step;
        }
        for (c, &k) in vm_unknowns.iter().enumerate() {
            let step = dx[va_unknowns.len() + c].clamp(-opts.max_vm_step, opts.max_vm_step);
            state[k].vm = (state[k].vm + step).max(1e-3);
        }
        iterations += 1;
    }
}

/// Pi-model branch flows at both ends, in p.u. Positive values flow from the
/// bus into the line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

pub fn line_flow(branch: &Branch, v_from: Complex64, v_to: Complex64) -> LineFlow {
    let y_series = Complex64::new(1.0, 0.0) / branch.series_impedance;
    let y_half = branch.shunt_admittance / 2.0;
    let i_from = (v_from - v_to) * y_series + v_from * y_half;
    let i_to = (v_to - v_from) * y_series + v_to * y_half;
    let s_from = v_from * i_from.conj();
    let s_to = v_to * i_to.conj();
    LineFlow {
        p_from: s_from.re,
        q_from: s_from.im,
        p_to: s_to.re,
        q_to: s_to.im,
    }
}

/// Builds mask and starting state for a conventional power flow over the
/// whole network: the slack bus holds its voltage phasor, SG buses hold
/// |V| and P, IBR buses hold their P/Q setpoints, everything else is PQ.
pub fn regular_power_flow_setup(
    network: &Network,
    slack_bus_id: usize,
) -> Result<(VariableMask, Vec<BusVariables>), PowerFlowError> {
    let slack_idx = network
        .bus_index(slack_bus_id)
        .ok_or_else(|| PowerFlowError::Dimension(format!("slack bus {slack_bus_id} not found")))?;

    let mut entries = Vec::with_capacity(network.buses.len());
    let mut state = Vec::with_capacity(network.buses.len());
    for (idx, bus) in network.buses.iter().enumerate() {
        let entry = if idx == slack_idx {
            MaskEntry::VOLTAGE
        } else {
            match bus.kind {
                BusKind::Sg => MaskEntry::PV,
                BusKind::Ibr | BusKind::Load | BusKind::Transfer => MaskEntry::PQ,
            }
        };
        let (p, q) = network.scheduled_injection(bus.id);
        entries.push(entry);
        state.push(BusVariables {
            vm: bus.voltage_magnitude,
            va: bus.voltage_angle,
            p,
            q,
        });
    }
    Ok((VariableMask { entries }, state))
}

/// Conventional Newton-Raphson power flow with a designated slack bus.
pub fn solve_regular_power_flow(
    network: &Network,
    slack_bus_id: usize,
    opts: &NrOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let y = crate::grid::build_admittance(network)
        .map_err(|e| PowerFlowError::Dimension(e.to_string()))?;
    let (mask, state) = regular_power_flow_setup(network, slack_bus_id)?;
    solve_masked(&y, &mask, &state, opts)
}
