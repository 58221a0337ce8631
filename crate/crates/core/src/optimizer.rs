//! Constrained stage optimization: minimize a weighted quadratic objective
//! over the masked power-flow manifold subject to box bounds.
//!
//! Buses whose mask pins the voltage phasor while leaving P and Q free act
//! as the stage's actuators. Their phasors are the reduced decision
//! variables (warm-started from the supplied state and bounded like any
//! other quantity); the remaining free voltages are solved by the inner
//! Newton iteration and the free injections follow from the balance
//! equations. The first such bus anchors the angle reference unless the
//! mask already pins an angle outright. Bounds on dependent quantities are
//! enforced with a Powell-Hestenes-Rockafellar augmented Lagrangian wrapped
//! around a BFGS inner loop with adjoint gradients.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{PowerFlowError, StageError};
use crate::powerflow::{
    injection_jacobian, mismatch, solve_masked, BusVariables, NrOptions, PowerFlowSolution,
    Quantity, VariableMask,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarRef {
    pub bus: usize,
    pub quantity: Quantity,
}

/// One objective summand: `weight * (sum_i coef_i * var_i - target)^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveTerm {
    pub weight: f64,
    pub coefficients: Vec<(VarRef, f64)>,
    pub target: f64,
}

impl ObjectiveTerm {
    pub fn single(weight: f64, var: VarRef, target: f64) -> Self {
        ObjectiveTerm {
            weight,
            coefficients: vec![(var, 1.0)],
            target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub min: f64,
    pub max: f64,
}

impl Bound {
    pub const FREE: Bound = Bound {
        min: f64::NEG_INFINITY,
        max: f64::INFINITY,
    };

    pub fn new(min: f64, max: f64) -> Self {
        Bound { min, max }
    }
}

/// Bounds for the four quantities of one bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantityBounds {
    pub vm: Bound,
    pub va: Bound,
    pub p: Bound,
    pub q: Bound,
}

impl QuantityBounds {
    pub const FREE: QuantityBounds = QuantityBounds {
        vm: Bound::FREE,
        va: Bound::FREE,
        p: Bound::FREE,
        q: Bound::FREE,
    };

    pub fn get(&self, q: Quantity) -> Bound {
        match q {
            Quantity::Vm => self.vm,
            Quantity::Va => self.va,
            Quantity::P => self.p,
            Quantity::Q => self.q,
        }
    }
}

/// One stage of the hierarchical optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub mask: VariableMask,
    /// Full variable vector: fixed entries are boundary data, free entries
    /// are the warm start (normally the pre-contingency solution).
    pub initial: Vec<BusVariables>,
    pub objective: Vec<ObjectiveTerm>,
    pub bounds: Vec<QuantityBounds>,
    /// Bus indices over which the balance equations are enforced
    /// (normally every bus of the stage network).
    pub balance_scope: Vec<usize>,
    /// Voltage-pinned buses excluded from the decision set; their phasors
    /// stay literally constant (conventional slack behaviour).
    pub hard_reference: BTreeSet<usize>,
    /// Bus ids for reporting, parallel to the local indexing.
    pub bus_ids: Vec<usize>,
    /// Apparent-power capability circles `(local bus, s_max)` enforced on
    /// the bus injection.
    pub mva_limits: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct StageOptions {
    pub nr: NrOptions,
    pub constraint_tol: f64,
    pub optimality_tol: f64,
    pub mismatch_tol: f64,
    pub mu_initial: f64,
    pub mu_factor: f64,
    pub mu_max: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for StageOptions {
    fn default() -> Self {
        StageOptions {
            nr: NrOptions {
                tolerance: 1e-11,
                max_iterations: 60,
                ..NrOptions::default()
            },
            constraint_tol: 1e-8,
            optimality_tol: 1e-6,
            mismatch_tol: 1e-6,
            mu_initial: 10.0,
            mu_factor: 10.0,
            mu_max: 1e8,
            max_outer: 30,
            max_inner: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageSolveReport {
    pub solution: PowerFlowSolution,
    pub objective_value: f64,
    /// Infinity norm of the augmented-Lagrangian gradient at the solution.
    pub optimality: f64,
    pub constraint_violation: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub decision_dim: usize,
}

#[derive(Debug, Clone, Copy)]
enum Constraint {
    /// +1: var - bound <= 0 (upper); -1: bound - var <= 0 (lower).
    Box { var: VarRef, sign: f64, bound: f64 },
    /// p^2 + q^2 - s_max^2 <= 0 at one bus.
    Circle { bus: usize, s_max: f64 },
}

impl Constraint {
    fn value(&self, z: &[BusVariables]) -> f64 {
        match *self {
            Constraint::Box { var, sign, bound } => sign * (z[var.bus].get(var.quantity) - bound),
            Constraint::Circle { bus, s_max } => {
                z[bus].p * z[bus].p + z[bus].q * z[bus].q - s_max * s_max
            }
        }
    }

    /// Adds `coeff * d(c)/d(quantity)` into the full-variable gradient.
    fn add_gradient(&self, z: &[BusVariables], coeff: f64, gfull: &mut [[f64; 4]]) {
        match *self {
            Constraint::Box { var, sign, .. } => {
                gfull[var.bus][qidx(var.quantity)] += coeff * sign;
            }
            Constraint::Circle { bus, .. } => {
                gfull[bus][qidx(Quantity::P)] += coeff * 2.0 * z[bus].p;
                gfull[bus][qidx(Quantity::Q)] += coeff * 2.0 * z[bus].q;
            }
        }
    }

    fn describe(&self, bus_ids: &[usize]) -> String {
        match *self {
            Constraint::Box { var, sign, .. } => {
                let side = if sign > 0.0 { "upper" } else { "lower" };
                format!(
                    "{:?} {side} bound at bus {}",
                    var.quantity, bus_ids[var.bus]
                )
            }
            Constraint::Circle { bus, .. } => {
                format!("MVA capability circle at bus {}", bus_ids[bus])
            }
        }
    }
}

/// Where a decision coordinate lives.
#[derive(Debug, Clone, Copy)]
struct DecisionVar {
    bus: usize,
    quantity: Quantity, // Vm or Va
}

struct Problem<'a> {
    y: &'a DMatrix<Complex64>,
    spec: &'a StageSpec,
    opts: &'a StageOptions,
    n: usize,
    decisions: Vec<DecisionVar>,
    constraints: Vec<Constraint>,
    /// Inner Newton unknowns: free Va then free Vm bus indices.
    va_unknowns: Vec<usize>,
    vm_unknowns: Vec<usize>,
    /// Balance equation rows: P rows then Q rows (bus indices).
    p_rows: Vec<usize>,
    q_rows: Vec<usize>,
    /// Warm start for the inner solve, updated after each success.
    warm: std::cell::RefCell<Vec<BusVariables>>,
}

struct Evaluation {
    state: Vec<BusVariables>,
    phi: f64,
}

impl<'a> Problem<'a> {
    fn decision_bus_set(&self) -> BTreeSet<usize> {
        self.decisions.iter().map(|d| d.bus).collect()
    }

    /// Applies decisions onto a state template.
    fn apply_decisions(&self, u: &DVector<f64>, state: &mut [BusVariables]) {
        for (i, d) in self.decisions.iter().enumerate() {
            state[d.bus].set(d.quantity, u[i]);
        }
    }

    /// Inner power-flow solve for the dependent voltages, then evaluates
    /// the free injections. Warm-starts from the last accepted point so a
    /// rejected trial cannot drag the iteration onto a spurious solution
    /// branch.
    fn inner_solve(&self, u: &DVector<f64>) -> Result<Vec<BusVariables>, PowerFlowError> {
        let mut state = self.warm.borrow().clone();
        self.apply_decisions(u, &mut state);
        let sol = solve_masked(self.y, &self.spec.mask, &state, &self.opts.nr)?;
        Ok(sol.bus_state)
    }

    fn accept(&self, state: &[BusVariables]) {
        *self.warm.borrow_mut() = state.to_vec();
    }

    fn objective_value(&self, z: &[BusVariables]) -> f64 {
        self.spec
            .objective
            .iter()
            .map(|t| {
                let v: f64 = t
                    .coefficients
                    .iter()
                    .map(|(r, c)| c * z[r.bus].get(r.quantity))
                    .sum();
                t.weight * (v - t.target) * (v - t.target)
            })
            .sum()
    }

    fn phi(&self, z: &[BusVariables], lambda: &[f64], mu: f64) -> f64 {
        let mut phi = self.objective_value(z);
        for (j, c) in self.constraints.iter().enumerate() {
            let cv = c.value(z);
            let t = (lambda[j] + mu * cv).max(0.0);
            phi += (t * t - lambda[j] * lambda[j]) / (2.0 * mu);
        }
        phi
    }

    fn evaluate(&self, u: &DVector<f64>, lambda: &[f64], mu: f64) -> Option<Evaluation> {
        let state = self.inner_solve(u).ok()?;
        let phi = self.phi(&state, lambda, mu);
        if !phi.is_finite() {
            return None;
        }
        Some(Evaluation { state, phi })
    }

    /// Factors the implicit-function pieces at a solved state so several
    /// sensitivities can be pulled back through one decomposition.
    fn adjoint(&self, state: &[BusVariables]) -> AdjointWorkspace {
        let (dp_dva, dp_dvm, dq_dva, dq_dvm) = injection_jacobian(self.y, state);
        let n_s = self.va_unknowns.len() + self.vm_unknowns.len();
        let n_eq = self.p_rows.len() + self.q_rows.len();
        debug_assert_eq!(n_s, n_eq);

        let f_s_t_lu = if n_s > 0 {
            let mut f_s = DMatrix::<f64>::zeros(n_eq, n_s);
            for (r, &k) in self.p_rows.iter().enumerate() {
                for (c, &m) in self.va_unknowns.iter().enumerate() {
                    f_s[(r, c)] = dp_dva[(k, m)];
                }
                for (c, &m) in self.vm_unknowns.iter().enumerate() {
                    f_s[(r, self.va_unknowns.len() + c)] = dp_dvm[(k, m)];
                }
            }
            for (r, &k) in self.q_rows.iter().enumerate() {
                let row = self.p_rows.len() + r;
                for (c, &m) in self.va_unknowns.iter().enumerate() {
                    f_s[(row, c)] = dq_dva[(k, m)];
                }
                for (c, &m) in self.vm_unknowns.iter().enumerate() {
                    f_s[(row, self.va_unknowns.len() + c)] = dq_dvm[(k, m)];
                }
            }
            Some(f_s.transpose().lu())
        } else {
            None
        };
        AdjointWorkspace {
            dp_dva,
            dp_dvm,
            dq_dva,
            dq_dvm,
            f_s_t_lu,
        }
    }

    /// Pulls a full-variable gradient (d phi / d quantity per bus) back to
    /// the decision space through the implicit function theorem.
    fn backprop(&self, ws: &AdjointWorkspace, gfull: &[[f64; 4]]) -> DVector<f64> {
        let n = self.n;
        // Sensitivity w.r.t. every voltage coordinate through the evaluated
        // free injections plus any direct Vm/Va dependence. Column layout:
        // Va of all buses, then Vm of all buses.
        let mut g_volt = DVector::<f64>::zeros(2 * n);
        for k in 0..n {
            let ap = if self.spec.mask.entries[k].p_fixed {
                0.0
            } else {
                gfull[k][2]
            };
            let aq = if self.spec.mask.entries[k].q_fixed {
                0.0
            } else {
                gfull[k][3]
            };
            if ap == 0.0 && aq == 0.0 {
                continue;
            }
            for m in 0..n {
                g_volt[m] += ap * ws.dp_dva[(k, m)] + aq * ws.dq_dva[(k, m)];
                g_volt[n + m] += ap * ws.dp_dvm[(k, m)] + aq * ws.dq_dvm[(k, m)];
            }
        }
        for k in 0..n {
            g_volt[k] += gfull[k][1];
            g_volt[n + k] += gfull[k][0];
        }

        let mut grad = DVector::<f64>::zeros(self.decisions.len());
        for (i, d) in self.decisions.iter().enumerate() {
            grad[i] = match d.quantity {
                Quantity::Va => g_volt[d.bus],
                Quantity::Vm => g_volt[n + d.bus],
                _ => unreachable!(),
            };
        }

        let Some(lu) = &ws.f_s_t_lu else {
            return grad;
        };
        let n_s = self.va_unknowns.len() + self.vm_unknowns.len();
        let mut g_s = DVector::<f64>::zeros(n_s);
        for (c, &m) in self.va_unknowns.iter().enumerate() {
            g_s[c] = g_volt[m];
        }
        for (c, &m) in self.vm_unknowns.iter().enumerate() {
            g_s[self.va_unknowns.len() + c] = g_volt[n + m];
        }
        let w = match lu.solve(&g_s) {
            Some(w) => w,
            None => return grad, // singular: fall back to the direct part
        };

        // grad -= w^T F_u.
        for (i, d) in self.decisions.iter().enumerate() {
            let mut dot = 0.0;
            for (r, &k) in self.p_rows.iter().enumerate() {
                dot += w[r]
                    * match d.quantity {
                        Quantity::Va => ws.dp_dva[(k, d.bus)],
                        Quantity::Vm => ws.dp_dvm[(k, d.bus)],
                        _ => unreachable!(),
                    };
            }
            for (r, &k) in self.q_rows.iter().enumerate() {
                dot += w[self.p_rows.len() + r]
                    * match d.quantity {
                        Quantity::Va => ws.dq_dva[(k, d.bus)],
                        Quantity::Vm => ws.dq_dvm[(k, d.bus)],
                        _ => unreachable!(),
                    };
            }
            grad[i] -= dot;
        }
        grad
    }

    fn gfull_objective(&self, state: &[BusVariables]) -> Vec<[f64; 4]> {
        let mut gfull = vec![[0.0f64; 4]; self.n];
        for t in &self.spec.objective {
            let v: f64 = t
                .coefficients
                .iter()
                .map(|(r, c)| c * state[r.bus].get(r.quantity))
                .sum();
            let outer = 2.0 * t.weight * (v - t.target);
            for (r, c) in &t.coefficients {
                gfull[r.bus][qidx(r.quantity)] += outer * c;
            }
        }
        gfull
    }

    fn gfull_penalty(&self, state: &[BusVariables], lambda: &[f64], mu: f64) -> Vec<[f64; 4]> {
        let mut gfull = vec![[0.0f64; 4]; self.n];
        for (j, c) in self.constraints.iter().enumerate() {
            let cv = c.value(state);
            let t = (lambda[j] + mu * cv).max(0.0);
            if t != 0.0 {
                c.add_gradient(state, t, &mut gfull);
            }
        }
        gfull
    }

    /// Adjoint gradient of phi with respect to the decisions, at a state
    /// already satisfying the inner equations.
    fn gradient(&self, state: &[BusVariables], lambda: &[f64], mu: f64) -> DVector<f64> {
        let ws = self.adjoint(state);
        let mut gfull = self.gfull_objective(state);
        for (g, p) in gfull.iter_mut().zip(self.gfull_penalty(state, lambda, mu)) {
            for i in 0..4 {
                g[i] += p[i];
            }
        }
        self.backprop(&ws, &gfull)
    }

    /// Least-squares multiplier estimates over the near-active constraint
    /// set: `min || grad_f + G lambda ||, lambda >= 0`. Seeding the
    /// augmented Lagrangian this way lets it settle on optima that sit
    /// exactly on a bound, which the feasible-side multiplier update never
    /// learns about.
    fn estimate_multipliers(
        &self,
        state: &[BusVariables],
        lambda: &mut [f64],
        activity_tol: f64,
    ) -> bool {
        let active: Vec<usize> = self
            .constraints
            .iter()
            .enumerate()
            .filter(|(_, c)| c.value(state) >= -activity_tol)
            .map(|(j, _)| j)
            .collect();
        if active.is_empty() {
            return false;
        }
        let ws = self.adjoint(state);
        let grad_f = self.backprop(&ws, &self.gfull_objective(state));
        let d = self.decisions.len();
        let mut g = DMatrix::<f64>::zeros(d, active.len());
        for (col, &j) in active.iter().enumerate() {
            let c = self.constraints[j];
            let mut unit = vec![[0.0f64; 4]; self.n];
            c.add_gradient(state, 1.0, &mut unit);
            let gc = self.backprop(&ws, &unit);
            for r in 0..d {
                g[(r, col)] = gc[r];
            }
        }
        // Ridge-regularized normal equations, negatives clipped.
        let gtg = g.transpose() * &g + DMatrix::identity(active.len(), active.len()) * 1e-10;
        let rhs = g.transpose() * (-&grad_f);
        let Some(sol) = gtg.lu().solve(&rhs) else {
            return false;
        };
        let mut changed = false;
        for (col, &j) in active.iter().enumerate() {
            let v = sol[col].max(0.0);
            if (v - lambda[j]).abs() > 1e-12 {
                lambda[j] = v;
                changed = true;
            }
        }
        changed
    }
}

struct AdjointWorkspace {
    dp_dva: DMatrix<f64>,
    dp_dvm: DMatrix<f64>,
    dq_dva: DMatrix<f64>,
    dq_dvm: DMatrix<f64>,
    f_s_t_lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

fn qidx(q: Quantity) -> usize {
    match q {
        Quantity::Vm => 0,
        Quantity::Va => 1,
        Quantity::P => 2,
        Quantity::Q => 3,
    }
}

fn build_problem<'a>(
    y: &'a DMatrix<Complex64>,
    spec: &'a StageSpec,
    opts: &'a StageOptions,
) -> Result<Problem<'a>, StageError> {
    let n = spec.initial.len();
    if spec.mask.entries.len() != n || spec.bounds.len() != n || spec.bus_ids.len() != n {
        return Err(StageError::BadSpec(format!(
            "inconsistent lengths: state {n}, mask {}, bounds {}, ids {}",
            spec.mask.entries.len(),
            spec.bounds.len(),
            spec.bus_ids.len()
        )));
    }
    spec.mask.validate().map_err(StageError::Inner)?;
    for t in &spec.objective {
        if t.weight < 0.0 {
            return Err(StageError::BadSpec("negative objective weight".into()));
        }
    }
    for b in &spec.bounds {
        for q in [Quantity::Vm, Quantity::Va, Quantity::P, Quantity::Q] {
            let bd = b.get(q);
            if bd.min > bd.max {
                return Err(StageError::BadSpec("bound min above max".into()));
            }
        }
    }

    // Actuator buses: voltage phasor pinned by the mask, injections free.
    let mut vt_buses = Vec::new();
    let mut has_constant_angle = false;
    for (k, e) in spec.mask.entries.iter().enumerate() {
        let vt = e.vm_fixed && e.va_fixed && !e.p_fixed && !e.q_fixed;
        if vt && !spec.hard_reference.contains(&k) {
            vt_buses.push(k);
        } else if e.va_fixed {
            // Hard reference or a theta-pinned bus anchors the angle.
            has_constant_angle = true;
        }
    }

    let mut decisions = Vec::new();
    let mut anchored = has_constant_angle;
    for &k in &vt_buses {
        decisions.push(DecisionVar {
            bus: k,
            quantity: Quantity::Vm,
        });
        if anchored {
            decisions.push(DecisionVar {
                bus: k,
                quantity: Quantity::Va,
            });
        } else {
            // First actuator bus keeps its initial angle as the reference.
            anchored = true;
        }
    }
    if !anchored {
        return Err(StageError::NoReference);
    }

    let mut constraints = Vec::new();
    for (k, b) in spec.bounds.iter().enumerate() {
        for q in [Quantity::Vm, Quantity::Va, Quantity::P, Quantity::Q] {
            let bd = b.get(q);
            let var = VarRef { bus: k, quantity: q };
            if bd.max.is_finite() {
                constraints.push(Constraint::Box {
                    var,
                    sign: 1.0,
                    bound: bd.max,
                });
            }
            if bd.min.is_finite() {
                constraints.push(Constraint::Box {
                    var,
                    sign: -1.0,
                    bound: bd.min,
                });
            }
        }
    }
    for &(bus, s_max) in &spec.mva_limits {
        if bus >= n {
            return Err(StageError::BadSpec(format!("mva limit at unknown bus {bus}")));
        }
        constraints.push(Constraint::Circle { bus, s_max });
    }

    let va_unknowns: Vec<usize> = (0..n)
        .filter(|&k| !spec.mask.entries[k].va_fixed)
        .collect();
    let vm_unknowns: Vec<usize> = (0..n)
        .filter(|&k| !spec.mask.entries[k].vm_fixed)
        .collect();
    let p_rows: Vec<usize> = (0..n).filter(|&k| spec.mask.entries[k].p_fixed).collect();
    let q_rows: Vec<usize> = (0..n).filter(|&k| spec.mask.entries[k].q_fixed).collect();

    Ok(Problem {
        y,
        spec,
        opts,
        n,
        decisions,
        constraints,
        va_unknowns,
        vm_unknowns,
        p_rows,
        q_rows,
        warm: std::cell::RefCell::new(spec.initial.to_vec()),
    })
}

/// Minimizes the stage objective subject to the power balance on the
/// stage network and all bounds.
pub fn solve_constrained_stage(
    y: &DMatrix<Complex64>,
    spec: &StageSpec,
    opts: &StageOptions,
) -> Result<StageSolveReport, StageError> {
    let problem = build_problem(y, spec, opts)?;
    let d = problem.decisions.len();

    // Fixed quantities that are out of bounds make the stage infeasible
    // outright (excluding decision phasors, which the optimizer moves).
    let decision_buses = problem.decision_bus_set();
    for c in &problem.constraints {
        let fixed = match *c {
            Constraint::Box { var, .. } => {
                let e = spec.mask.entries[var.bus];
                let is_decision_volt = decision_buses.contains(&var.bus)
                    && matches!(var.quantity, Quantity::Vm | Quantity::Va);
                e.is_fixed(var.quantity) && !is_decision_volt
            }
            Constraint::Circle { bus, .. } => {
                spec.mask.entries[bus].p_fixed && spec.mask.entries[bus].q_fixed
            }
        };
        if fixed {
            let cv = c.value(&spec.initial);
            if cv > opts.constraint_tol {
                return Err(StageError::Infeasible {
                    constraint: c.describe(&spec.bus_ids),
                    violation: cv,
                });
            }
        }
    }

    // Initial decisions, projected into their boxes.
    let mut u = DVector::<f64>::zeros(d);
    for (i, dv) in problem.decisions.iter().enumerate() {
        let b = spec.bounds[dv.bus].get(dv.quantity);
        u[i] = spec.initial[dv.bus].get(dv.quantity).clamp(b.min, b.max);
    }

    let mut lambda = vec![0.0f64; problem.constraints.len()];
    let mut mu = opts.mu_initial;
    let mut inner_total = 0usize;
    let mut last_violation = f64::INFINITY;

    let mut eval = problem
        .evaluate(&u, &lambda, mu)
        .ok_or(StageError::Inner(PowerFlowError::Diverged {
            iterations: 0,
            max_mismatch: f64::INFINITY,
            last: Box::new(PowerFlowSolution {
                bus_state: spec.initial.to_vec(),
                converged: false,
                iterations: 0,
                max_mismatch: f64::INFINITY,
            }),
        }))?;
    problem.accept(&eval.state);

    let max_violation = |state: &[BusVariables]| -> f64 {
        problem
            .constraints
            .iter()
            .map(|c| c.value(state).max(0.0))
            .fold(0.0f64, f64::max)
    };

    let mut outer = 0;
    let mut optimality;
    loop {
        // Inner minimization of the augmented Lagrangian: damped Newton
        // with a finite-difference Hessian over the adjoint gradients.
        // The dimension is small enough that the dense Hessian is cheap,
        // and exact curvature handles the penalty corners that starve
        // quasi-Newton updates.
        let mut grad = problem.gradient(&eval.state, &lambda, mu);
        let mut inner = 0;
        let gtol = opts.optimality_tol;
        while inner < opts.max_inner {
            let gnorm = grad.amax();
            if !gnorm.is_finite() || gnorm <= gtol {
                break;
            }

            // Central-difference Hessian of phi via the analytic gradient.
            let mut hess = DMatrix::<f64>::zeros(d, d);
            let mut fd_ok = true;
            for i in 0..d {
                let h = 1e-6 * (1.0 + u[i].abs());
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += h;
                dn[i] -= h;
                let (Some(ep), Some(en)) = (
                    problem.evaluate(&up, &lambda, mu),
                    problem.evaluate(&dn, &lambda, mu),
                ) else {
                    fd_ok = false;
                    break;
                };
                let gp = problem.gradient(&ep.state, &lambda, mu);
                let gn = problem.gradient(&en.state, &lambda, mu);
                for r in 0..d {
                    hess[(r, i)] = (gp[r] - gn[r]) / (2.0 * h);
                }
            }

            // Damped Newton direction; fall back to steepest descent when
            // the model is unusable.
            let mut dir = -grad.clone();
            if fd_ok {
                let sym = (&hess + hess.transpose()) * 0.5;
                let mut tau = 0.0f64;
                let scale = (0..d).map(|i| sym[(i, i)].abs()).fold(1e-8, f64::max);
                for _ in 0..12 {
                    let m = &sym + DMatrix::identity(d, d) * tau;
                    if let Some(step) = m.lu().solve(&(-&grad)) {
                        if step.dot(&grad) < 0.0 && step.iter().all(|x| x.is_finite()) {
                            dir = step;
                            break;
                        }
                    }
                    tau = if tau == 0.0 { 1e-6 * scale } else { tau * 10.0 };
                }
            }
            let slope = grad.dot(&dir);

            let mut step = 1.0f64;
            let mut accepted = None;
            let mut fallback: Option<(DVector<f64>, Evaluation)> = None;
            for _ in 0..40 {
                let u_try = &u + &dir * step;
                if let Some(e) = problem.evaluate(&u_try, &lambda, mu) {
                    if e.phi <= eval.phi + 1e-4 * step * slope {
                        accepted = Some((u_try, e));
                        break;
                    }
                    if e.phi < eval.phi && fallback.is_none() {
                        fallback = Some((u_try, e));
                    }
                }
                step *= 0.5;
            }
            // A plain decrease still makes progress when the curvature
            // model misjudges the penalty corner.
            let accepted = accepted.or(fallback);
            let Some((u_new, e_new)) = accepted else {
                break; // line search exhausted
            };
            problem.accept(&e_new.state);
            grad = problem.gradient(&e_new.state, &lambda, mu);
            u = u_new;
            eval = e_new;
            inner += 1;
        }
        inner_total += inner;
        optimality = grad.amax();
        outer += 1;

        let violation = max_violation(&eval.state);
        if violation <= opts.constraint_tol {
            if optimality <= opts.optimality_tol || d == 0 {
                break;
            }
            if outer >= opts.max_outer {
                return Err(StageError::NotConverged {
                    optimality,
                    violation,
                    last: Box::new(PowerFlowSolution {
                        bus_state: eval.state.clone(),
                        converged: false,
                        iterations: inner_total,
                        max_mismatch: violation,
                    }),
                });
            }
            // Feasible but not stationary: the optimum sits on a bound the
            // feasible-side update cannot learn. Seed the multipliers from
            // the KKT least-squares fit over the near-active set, widening
            // the activity window on repeated stalls so constraints the
            // iterate hovers near are picked up.
            if problem.estimate_multipliers(&eval.state, &mut lambda, 1e-5) {
                // With the multipliers carrying the active bounds, a modest
                // penalty keeps the corner wide enough for the Newton model.
                mu = opts.mu_initial;
            }
        } else if outer >= opts.max_outer
            || (mu >= opts.mu_max && violation > 100.0 * opts.constraint_tol)
        {
            // Penalties exhausted without restoring feasibility.
            let worst = problem
                .constraints
                .iter()
                .max_by(|a, b| {
                    a.value(&eval.state)
                        .partial_cmp(&b.value(&eval.state))
                        .unwrap()
                })
                .unwrap();
            return Err(StageError::Infeasible {
                constraint: worst.describe(&spec.bus_ids),
                violation: worst.value(&eval.state),
            });
        } else {
            // Standard multiplier and penalty updates.
            for (j, c) in problem.constraints.iter().enumerate() {
                lambda[j] = (lambda[j] + mu * c.value(&eval.state)).max(0.0);
            }
            if violation > 0.25 * last_violation {
                mu = (mu * opts.mu_factor).min(opts.mu_max);
            }
        }
        last_violation = violation;
        // The cached phi is recomputed so the next inner loop starts from a
        // consistent baseline.
        eval.phi = problem.phi(&eval.state, &lambda, mu);
    }

    // Post-projection: snap residual bound violations (at most
    // constraint_tol) onto the feasible set.
    let mut state = eval.state.clone();
    for c in &problem.constraints {
        match *c {
            Constraint::Box { var, sign, bound } => {
                let v = state[var.bus].get(var.quantity);
                if sign * (v - bound) > 0.0 {
                    state[var.bus].set(var.quantity, bound);
                }
            }
            Constraint::Circle { bus, s_max } => {
                let s = state[bus].p.hypot(state[bus].q);
                if s > s_max {
                    let scale = s_max / s;
                    state[bus].p *= scale;
                    state[bus].q *= scale;
                }
            }
        }
    }

    let res = mismatch(y, &state);
    let max_mis = spec
        .balance_scope
        .iter()
        .map(|&k| res[k].norm())
        .fold(0.0f64, f64::max);
    if max_mis > opts.mismatch_tol {
        return Err(StageError::NotConverged {
            optimality,
            violation: max_mis,
            last: Box::new(PowerFlowSolution {
                bus_state: state,
                converged: false,
                iterations: inner_total,
                max_mismatch: max_mis,
            }),
        });
    }

    Ok(StageSolveReport {
        objective_value: problem.objective_value(&state),
        constraint_violation: max_violation(&state),
        solution: PowerFlowSolution {
            bus_state: state,
            converged: true,
            iterations: inner_total,
            max_mismatch: max_mis,
        },
        optimality,
        outer_iterations: outer,
        inner_iterations: inner_total,
        decision_dim: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::MaskEntry;

    fn y_from(branches: &[(usize, usize, Complex64)], n: usize) -> DMatrix<Complex64> {
        let mut y = DMatrix::zeros(n, n);
        for &(k, m, z) in branches {
            let ys = Complex64::new(1.0, 0.0) / z;
            y[(k, k)] += ys;
            y[(m, m)] += ys;
            y[(k, m)] -= ys;
            y[(m, k)] -= ys;
        }
        y
    }

    /// Slack + IBR + load triangle used by several tests.
    fn toy() -> (DMatrix<Complex64>, StageSpec) {
        let y = y_from(
            &[
                (0, 2, Complex64::new(0.01, 0.08)),
                (1, 2, Complex64::new(0.005, 0.05)),
                (0, 1, Complex64::new(0.02, 0.12)),
            ],
            3,
        );
        let mask = VariableMask {
            entries: vec![MaskEntry::VOLTAGE, MaskEntry::VOLTAGE, MaskEntry::PQ],
        };
        let initial = vec![
            BusVariables {
                vm: 1.02,
                va: 0.0,
                p: 0.0,
                q: 0.0,
            },
            BusVariables {
                vm: 1.0,
                va: 0.0,
                p: 0.3,
                q: 0.05,
            },
            BusVariables {
                vm: 1.0,
                va: 0.0,
                p: -0.6,
                q: -0.15,
            },
        ];
        let mut bounds = vec![QuantityBounds::FREE; 3];
        bounds[1].vm = Bound::new(0.9, 1.1);
        bounds[1].p = Bound::new(0.0, 0.9);
        bounds[1].q = Bound::new(-0.5, 0.5);
        bounds[2].vm = Bound::new(0.9, 1.1);
        let spec = StageSpec {
            mask,
            initial,
            objective: vec![],
            bounds,
            balance_scope: vec![0, 1, 2],
            hard_reference: BTreeSet::from([0]),
            bus_ids: vec![1, 2, 3],
            mva_limits: Vec::new(),
        };
        (y, spec)
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let (y, mut spec) = toy();
        spec.objective = vec![
            ObjectiveTerm::single(
                1.0,
                VarRef {
                    bus: 1,
                    quantity: Quantity::P,
                },
                0.45,
            ),
            ObjectiveTerm::single(
                0.5,
                VarRef {
                    bus: 1,
                    quantity: Quantity::Q,
                },
                0.10,
            ),
            ObjectiveTerm::single(
                2.0,
                VarRef {
                    bus: 2,
                    quantity: Quantity::Vm,
                },
                1.0,
            ),
        ];
        let opts = StageOptions::default();
        let problem = build_problem(&y, &spec, &opts).unwrap();
        let d = problem.decisions.len();
        assert_eq!(d, 2, "ibr bus contributes vm and va decisions");

        let lambda = vec![0.1; problem.constraints.len()];
        let mu = 7.0;
        let mut u = DVector::from_element(d, 0.0);
        for (i, dv) in problem.decisions.iter().enumerate() {
            u[i] = spec.initial[dv.bus].get(dv.quantity);
        }
        u[0] += 0.01;

        let e = problem.evaluate(&u, &lambda, mu).unwrap();
        let g = problem.gradient(&e.state, &lambda, mu);
        let h = 1e-7;
        for i in 0..d {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += h;
            dn[i] -= h;
            let fp = problem.evaluate(&up, &lambda, mu).unwrap().phi;
            let fm = problem.evaluate(&dn, &lambda, mu).unwrap().phi;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() / fd.abs().max(1.0) < 1e-5,
                "component {i}: adjoint {} vs fd {}",
                g[i],
                fd
            );
        }
    }

    #[test]
    fn feasible_target_reached_with_zero_objective() {
        // Targets taken from a plain solve of the same network: the optimum
        // reproduces it with objective ~ 0.
        let (y, mut spec) = toy();
        let base = solve_masked(&y, &spec.mask, &spec.initial, &NrOptions::default()).unwrap();
        spec.objective = vec![
            ObjectiveTerm::single(
                1.0,
                VarRef {
                    bus: 1,
                    quantity: Quantity::P,
                },
                base.bus_state[1].p,
            ),
            ObjectiveTerm::single(
                1.0,
                VarRef {
                    bus: 1,
                    quantity: Quantity::Q,
                },
                base.bus_state[1].q,
            ),
        ];
        let report = solve_constrained_stage(&y, &spec, &StageOptions::default()).unwrap();
        assert!(report.objective_value < 1e-10, "{}", report.objective_value);
        assert!((report.solution.bus_state[1].p - base.bus_state[1].p).abs() < 1e-5);
        assert!(report.optimality <= 1e-6);
    }

    #[test]
    fn toy_matches_grid_search_oracle() {
        // Load step of 0.1 on the toy; the primary-style target moves the
        // IBR injection. Brute-force grid search over the two free IBR
        // injections with an inner power-flow solve is the oracle.
        let (y, mut spec) = toy();
        spec.initial[2].p -= 0.1;
        let p_target = 0.42;
        let q_target = 0.08;
        spec.objective = vec![
            ObjectiveTerm::single(
                1.0,
                VarRef {
                    bus: 1,
                    quantity: Quantity::P,
                },
                p_target,
            ),
            ObjectiveTerm::single(
                1.0,
                VarRef {
                    bus: 1,
                    quantity: Quantity::Q,
                },
                q_target,
            ),
            ObjectiveTerm::single(
                0.25,
                VarRef {
                    bus: 2,
                    quantity: Quantity::Vm,
                },
                1.0,
            ),
        ];
        let report = solve_constrained_stage(&y, &spec, &StageOptions::default()).unwrap();

        // Oracle: IBR bus becomes a PQ bus at each grid point.
        let oracle_mask = VariableMask {
            entries: vec![MaskEntry::VOLTAGE, MaskEntry::PQ, MaskEntry::PQ],
        };
        let objective = |z: &[BusVariables]| -> f64 {
            (z[1].p - p_target).powi(2)
                + (z[1].q - q_target).powi(2)
                + 0.25 * (z[2].vm - 1.0).powi(2)
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let coarse = 0.02;
        let probe = |p: f64, q: f64, best: &mut (f64, f64, f64)| {
            let mut init = spec.initial.clone();
            init[1].p = p;
            init[1].q = q;
            if let Ok(sol) = solve_masked(&y, &oracle_mask, &init, &NrOptions::default()) {
                if sol.bus_state[1].vm < 0.9
                    || sol.bus_state[1].vm > 1.1
                    || sol.bus_state[2].vm < 0.9
                    || sol.bus_state[2].vm > 1.1
                {
                    return;
                }
                let f = objective(&sol.bus_state);
                if f < best.0 {
                    *best = (f, p, q);
                }
            }
        };
        let mut p = 0.0;
        while p <= 0.9 {
            let mut q = -0.5;
            while q <= 0.5 {
                probe(p, q, &mut best);
                q += coarse;
            }
            p += coarse;
        }
        let (center_p, center_q) = (best.1, best.2);
        let mut p = (center_p - 2.0 * coarse).max(0.0);
        while p <= (center_p + 2.0 * coarse).min(0.9) {
            let mut q = (center_q - 2.0 * coarse).max(-0.5);
            while q <= (center_q + 2.0 * coarse).min(0.5) {
                probe(p, q, &mut best);
                q += 1e-3;
            }
            p += 1e-3;
        }

        let sp = report.solution.bus_state[1].p;
        let sq = report.solution.bus_state[1].q;
        assert!(
            (sp - best.1).abs() <= 1e-3 && (sq - best.2).abs() <= 1e-3,
            "solver ({sp:.5}, {sq:.5}) vs grid ({:.5}, {:.5})",
            best.1,
            best.2
        );
    }

    #[test]
    fn tightened_voltage_bound_reports_infeasibility() {
        let (y, mut spec) = toy();
        spec.initial[2].p = -0.8;
        spec.objective = vec![ObjectiveTerm::single(
            1.0,
            VarRef {
                bus: 1,
                quantity: Quantity::P,
            },
            0.5,
        )];
        // No reachable operating point keeps the load bus above 1.04 with
        // this loading; the report must cite the |V| bound.
        spec.bounds[2].vm = Bound::new(1.04, 1.10);
        let err = solve_constrained_stage(&y, &spec, &StageOptions::default());
        match err {
            Err(StageError::Infeasible { constraint, .. }) => {
                assert!(constraint.contains("Vm"), "constraint: {constraint}");
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }
}
