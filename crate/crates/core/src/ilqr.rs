//! Iterative LQR over the implicit contact dynamics.
//!
//! The objective is a goal-tracking quadratic plus a squared signed-distance
//! penalty that keeps the pusher near the face:
//!
//! ```text
//! J = e_T' Q e_T + sum_t ( e_t' Q e_t + u_t' R u_t + w/2 phi(x_t)^2 ),   e = x - x_goal
//! ```
//!
//! Each rollout calls the lower-level solver once per step and each backward
//! pass uses its implicit-function Jacobians. Optionally the whole
//! optimization is repeated along a decreasing sequence of lower-level
//! relaxations, each stage warm-started with the previous stage's controls.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lower::{ContactForce, LowerProblem, LowerSolution, LowerSolver, SolveError, SolverSettings, StepLinearization};
use crate::model::{face_normal, face_tangent, ContactModel, Control, ModelError, State, SystemParams};

#[derive(Debug, Error)]
pub enum IlqrError {
    #[error("regularized Q_uu is not positive definite at step {step}")]
    NotPositiveDefinite { step: usize },
    #[error("regularization exceeded {reg:e} without a positive-definite backward pass")]
    RegularizationExhausted { reg: f64, incumbent: Box<Trajectory> },
    #[error("lower-level solve failed: {source}")]
    Lower {
        source: SolveError,
        incumbent: Option<Box<Trajectory>>,
    },
    #[error("invalid optimizer input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl IlqrError {
    /// Best trajectory known when the error was raised.
    pub fn incumbent(&self) -> Option<&Trajectory> {
        match self {
            IlqrError::RegularizationExhausted { incumbent, .. } => Some(incumbent),
            IlqrError::Lower { incumbent, .. } => incumbent.as_deref(),
            _ => None,
        }
    }
}

/// Diagonal tracking weights, control weights and the signed-distance weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: DVector<f64>,
    pub r: DVector<f64>,
    pub w: f64,
    pub goal: DVector<f64>,
}

impl CostWeights {
    pub fn new(q: Vec<f64>, r: Vec<f64>, w: f64, goal: Vec<f64>) -> Result<Self, IlqrError> {
        let out = Self {
            q: DVector::from_vec(q),
            r: DVector::from_vec(r),
            w,
            goal: DVector::from_vec(goal),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), IlqrError> {
        if self.q.len() != self.goal.len() {
            return Err(IlqrError::Invalid(format!(
                "q has {} entries but the goal has {}",
                self.q.len(),
                self.goal.len()
            )));
        }
        if self.q.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(IlqrError::Invalid("q must be finite and nonnegative".into()));
        }
        if self.r.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(IlqrError::Invalid("r must be finite and positive".into()));
        }
        if !self.w.is_finite() || self.w < 0.0 {
            return Err(IlqrError::Invalid("w must be finite and nonnegative".into()));
        }
        if self.goal.iter().any(|v| !v.is_finite()) {
            return Err(IlqrError::Invalid("goal must be finite".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            q: &self.q * factor,
            r: &self.r * factor,
            w: self.w * factor,
            goal: self.goal.clone(),
        }
    }

    fn check_dims(&self, n: usize, m: usize) -> Result<(), IlqrError> {
        if self.q.len() != n || self.r.len() != m {
            return Err(IlqrError::Invalid(format!(
                "weights sized ({}, {}) for a system with n = {n}, m = {m}",
                self.q.len(),
                self.r.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostTerms {
    pub state: f64,
    pub control: f64,
    pub sdf: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.state + self.control + self.sdf
    }
}

/// Value, gradient and Hessian of one stage (cross term `l_ux` is zero).
#[derive(Debug, Clone)]
pub struct CostExpansion {
    pub terms: CostTerms,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
}

impl CostExpansion {
    pub fn value(&self) -> f64 {
        self.terms.total()
    }
}

/// Smallest pusher gap and the index attaining it (ties go to the lower index).
pub fn min_gap(x: &[f64], n_points: usize, params: &SystemParams) -> (f64, usize) {
    let theta = x[0];
    let nrm = face_normal(theta);
    let mut best = (f64::INFINITY, 0);
    for i in 0..n_points {
        let p = nalgebra::Vector2::new(x[1 + 2 * i], x[2 + 2 * i]);
        let g = nrm.dot(&p) - params.half_side() - params.pusher_radius;
        if g < best.0 {
            best = (g, i);
        }
    }
    best
}

/// Running cost `e'Qe + u'Ru + w/2 max(0, phi)^2` with exact derivatives.
pub fn stage_cost(x: &DVector<f64>, u: &DVector<f64>, weights: &CostWeights, params: &SystemParams) -> CostExpansion {
    let mut out = terminal_cost(x, weights);
    let ru = weights.r.component_mul(u);
    out.terms.control = u.dot(&ru);
    out.lu = 2.0 * ru;
    out.luu = DMatrix::from_diagonal(&(2.0 * &weights.r));

    let n_points = u.len() / 2;
    if weights.w > 0.0 && n_points > 0 {
        let (phi, i) = min_gap(x.as_slice(), n_points, params);
        if phi > 0.0 {
            let theta = x[0];
            let nrm = face_normal(theta);
            let tan = face_tangent(theta);
            let p = nalgebra::Vector2::new(x[1 + 2 * i], x[2 + 2 * i]);
            let (ix, iy) = (1 + 2 * i, 2 + 2 * i);
            let mut grad = DVector::zeros(x.len());
            grad[0] = tan.dot(&p);
            grad[ix] = nrm.x;
            grad[iy] = nrm.y;
            let mut hess = DMatrix::zeros(x.len(), x.len());
            hess[(0, 0)] = -nrm.dot(&p);
            hess[(0, ix)] = tan.x;
            hess[(ix, 0)] = tan.x;
            hess[(0, iy)] = tan.y;
            hess[(iy, 0)] = tan.y;
            let w = weights.w;
            out.terms.sdf = 0.5 * w * phi * phi;
            out.lx += w * phi * &grad;
            out.lxx += w * (&grad * grad.transpose() + phi * hess);
        }
    }
    out
}

/// Terminal cost `e'Qe`.
pub fn terminal_cost(x: &DVector<f64>, weights: &CostWeights) -> CostExpansion {
    let e = x - &weights.goal;
    let qe = weights.q.component_mul(&e);
    CostExpansion {
        terms: CostTerms {
            state: e.dot(&qe),
            control: 0.0,
            sdf: 0.0,
        },
        lx: 2.0 * qe,
        lu: DVector::zeros(0),
        lxx: DMatrix::from_diagonal(&(2.0 * &weights.q)),
        luu: DMatrix::zeros(0, 0),
    }
}

/// Discrete dynamics `x+ = f(x, u)` given by the lower-level solver.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub params: SystemParams,
    pub model: ContactModel,
    pub step: f64,
    pub solver: SolverSettings,
}

impl Dynamics {
    pub fn n_points(&self) -> usize {
        self.model.n_points()
    }
    pub fn state_dim(&self) -> usize {
        State::dim(self.n_points())
    }
    pub fn control_dim(&self) -> usize {
        2 * self.n_points()
    }

    pub fn problem(&self, x: &State, u: &Control, kappa: f64) -> Result<LowerProblem, SolveError> {
        LowerProblem::new(x.clone(), u.clone(), self.step, self.params.clone(), self.model.clone(), kappa)
    }

    /// Simulate `controls` from `x0` at relaxation `kappa`. Each step is warm
    /// started from the previous step's solution.
    pub fn simulate(
        &self,
        x0: &State,
        controls: &[Control],
        kappa: f64,
        weights: &CostWeights,
    ) -> Result<Trajectory, SolveError> {
        self.simulate_near(x0, controls, kappa, weights, None)
    }

    /// Like [`Dynamics::simulate`], but step `t` is warm started from the
    /// reference's solution at `t` when one is given.
    pub fn simulate_near(
        &self,
        x0: &State,
        controls: &[Control],
        kappa: f64,
        weights: &CostWeights,
        reference: Option<&Trajectory>,
    ) -> Result<Trajectory, SolveError> {
        let mut solver = LowerSolver::new(self.solver.clone());
        let mut states = Vec::with_capacity(controls.len() + 1);
        let mut solutions: Vec<LowerSolution> = Vec::with_capacity(controls.len());
        states.push(x0.clone());
        for (t, u) in controls.iter().enumerate() {
            let x = states.last().expect("nonempty");
            let problem = self.problem(x, u, kappa)?;
            let warm = reference.and_then(|r| r.solutions.get(t)).or(solutions.last());
            let sol = solver.solve_step(&problem, warm)?;
            states.push(sol.next_state.clone());
            solutions.push(sol);
        }
        Ok(Trajectory::assemble(states, controls.to_vec(), solutions, kappa, weights, &self.params))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Lower-level relaxation of the stage this iteration belongs to.
    pub kappa: f64,
    pub iteration: usize,
    pub cost: f64,
    pub delta_cost: f64,
    /// Accepted step, zero when the line search failed.
    pub alpha: f64,
    pub reg: f64,
    pub expected_decrease: f64,
    pub line_search_trials: usize,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerStats {
    pub iterations: usize,
    pub converged: bool,
    pub final_gradient_norm: f64,
    pub history: Vec<IterationRecord>,
}

/// States, controls, forces and cost of one rollout.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    /// Per-step contact forces acting over `[t, t+1]`.
    pub forces: Vec<Vec<ContactForce>>,
    pub ground_torque: Vec<f64>,
    pub cost: f64,
    /// `T` running terms followed by the terminal term.
    pub per_step_cost: Vec<CostTerms>,
    pub kappa: f64,
    pub stats: OptimizerStats,
    pub solutions: Vec<LowerSolution>,
}

impl Trajectory {
    fn assemble(
        states: Vec<State>,
        controls: Vec<Control>,
        solutions: Vec<LowerSolution>,
        kappa: f64,
        weights: &CostWeights,
        params: &SystemParams,
    ) -> Self {
        let mut per_step_cost = Vec::with_capacity(controls.len() + 1);
        for (x, u) in states.iter().zip(&controls) {
            let xv = DVector::from_vec(x.to_vec());
            let uv = DVector::from_vec(u.to_vec());
            per_step_cost.push(stage_cost(&xv, &uv, weights, params).terms);
        }
        let xt = DVector::from_vec(states.last().expect("nonempty").to_vec());
        per_step_cost.push(terminal_cost(&xt, weights).terms);
        let cost = per_step_cost.iter().map(CostTerms::total).sum();
        Self {
            forces: solutions.iter().map(|s| s.forces.clone()).collect(),
            ground_torque: solutions.iter().map(|s| s.ground_torque).collect(),
            states,
            controls,
            cost,
            per_step_cost,
            kappa,
            stats: OptimizerStats::default(),
            solutions,
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    fn expansions(&self, weights: &CostWeights, params: &SystemParams) -> Vec<CostExpansion> {
        let mut out: Vec<CostExpansion> = self
            .states
            .iter()
            .zip(&self.controls)
            .map(|(x, u)| {
                stage_cost(
                    &DVector::from_vec(x.to_vec()),
                    &DVector::from_vec(u.to_vec()),
                    weights,
                    params,
                )
            })
            .collect();
        out.push(terminal_cost(
            &DVector::from_vec(self.states.last().expect("nonempty").to_vec()),
            weights,
        ));
        out
    }
}

/// Affine control law of one backward pass plus its predicted decrease
/// `-(alpha * d1 + alpha^2 * d2)`.
#[derive(Debug, Clone)]
pub struct Gains {
    pub k: Vec<DVector<f64>>,
    pub big_k: Vec<DMatrix<f64>>,
    pub d1: f64,
    pub d2: f64,
    /// Largest `||Q_u||` over the horizon.
    pub gradient_norm: f64,
}

impl Gains {
    pub fn expected_decrease(&self, alpha: f64) -> f64 {
        -(alpha * self.d1 + alpha * alpha * self.d2)
    }
}

/// Riccati recursion. `costs` holds `T` running expansions and the terminal
/// one; `lins` holds the `T` step Jacobians.
pub fn backward_pass(costs: &[CostExpansion], lins: &[StepLinearization], reg: f64) -> Result<Gains, IlqrError> {
    let horizon = lins.len();
    if costs.len() != horizon + 1 {
        return Err(IlqrError::Invalid(format!(
            "expected {} cost expansions, got {}",
            horizon + 1,
            costs.len()
        )));
    }
    let mut vx = costs[horizon].lx.clone();
    let mut vxx = costs[horizon].lxx.clone();
    let mut k = vec![DVector::zeros(0); horizon];
    let mut big_k = vec![DMatrix::zeros(0, 0); horizon];
    let (mut d1, mut d2) = (0.0, 0.0);
    let mut gradient_norm: f64 = 0.0;
    for t in (0..horizon).rev() {
        let (a, b) = (&lins[t].a, &lins[t].b);
        let c = &costs[t];
        let qx = &c.lx + a.transpose() * &vx;
        let qu = &c.lu + b.transpose() * &vx;
        let qxx = &c.lxx + a.transpose() * &vxx * a;
        let quu = &c.luu + b.transpose() * &vxx * b;
        let qux = b.transpose() * &vxx * a;
        let m = quu.nrows();
        let quu_reg = &quu + DMatrix::identity(m, m) * reg;
        let chol = quu_reg.clone().cholesky().ok_or(IlqrError::NotPositiveDefinite { step: t })?;
        let kt = -chol.solve(&qu);
        let kk = -chol.solve(&qux);
        gradient_norm = gradient_norm.max(qu.norm());
        d1 += kt.dot(&qu);
        d2 += 0.5 * kt.dot(&(&quu * &kt));
        vx = &qx + kk.transpose() * &quu * &kt + kk.transpose() * &qu + qux.transpose() * &kt;
        vxx = &qxx + kk.transpose() * &quu * &kk + kk.transpose() * &qux + qux.transpose() * &kk;
        vxx = 0.5 * (&vxx + vxx.transpose());
        k[t] = kt;
        big_k[t] = kk;
    }
    Ok(Gains {
        k,
        big_k,
        d1,
        d2,
        gradient_norm,
    })
}

/// Roll out `u_t = ubar_t + alpha k_t + K_t (x_t - xbar_t)`.
pub fn forward_pass(
    dynamics: &Dynamics,
    incumbent: &Trajectory,
    gains: &Gains,
    alpha: f64,
    weights: &CostWeights,
) -> Result<Trajectory, SolveError> {
    let mut solver = LowerSolver::new(dynamics.solver.clone());
    let n_points = dynamics.n_points();
    let kappa = incumbent.kappa;
    let horizon = incumbent.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut solutions: Vec<LowerSolution> = Vec::with_capacity(horizon);
    states.push(incumbent.states[0].clone());
    for t in 0..horizon {
        let x = states.last().expect("nonempty");
        let dx = DVector::from_vec(x.to_vec()) - DVector::from_vec(incumbent.states[t].to_vec());
        let u = DVector::from_vec(incumbent.controls[t].to_vec()) + alpha * &gains.k[t] + &gains.big_k[t] * dx;
        let u = Control::from_slice(u.as_slice(), n_points)?;
        let problem = dynamics.problem(x, &u, kappa)?;
        let sol = solver.solve_step(&problem, incumbent.solutions.get(t))?;
        states.push(sol.next_state.clone());
        controls.push(u);
        solutions.push(sol);
    }
    Ok(Trajectory::assemble(states, controls, solutions, kappa, weights, &dynamics.params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlqrSettings {
    pub max_iterations: usize,
    /// Stop when `|dJ| < rel_tol (1 + |J|)`.
    pub rel_tol: f64,
    pub reg_init: f64,
    pub reg_max: f64,
    pub reg_up: f64,
    pub reg_down: f64,
    pub armijo: f64,
    pub backtrack: f64,
    /// Number of step halvings tried by the line search.
    pub line_search_steps: u32,
    /// Lower-level relaxations visited in order; the last one is the
    /// relaxation of the returned trajectory. Empty means the lower-level
    /// solver's final relaxation only.
    pub kappa_stages: Vec<f64>,
    /// Iteration cap of every stage but the last.
    pub stage_iterations: usize,
}

impl Default for IlqrSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            rel_tol: 1e-6,
            reg_init: 1e-6,
            reg_max: 1e6,
            reg_up: 10.0,
            reg_down: 2.0,
            armijo: 1e-4,
            backtrack: 0.5,
            line_search_steps: 10,
            kappa_stages: Vec::new(),
            stage_iterations: 50,
        }
    }
}

/// Result of one line search.
enum Step {
    Accepted(Box<Trajectory>, f64, usize),
    Rejected(usize),
}

fn line_search(
    dynamics: &Dynamics,
    incumbent: &Trajectory,
    gains: &Gains,
    weights: &CostWeights,
    settings: &IlqrSettings,
) -> Step {
    let mut alpha = 1.0;
    for trial in 0..=settings.line_search_steps {
        if let Ok(cand) = forward_pass(dynamics, incumbent, gains, alpha, weights) {
            let actual = incumbent.cost - cand.cost;
            let predicted = gains.expected_decrease(alpha);
            if cand.cost.is_finite() && actual >= 0.0 && actual >= settings.armijo * predicted {
                return Step::Accepted(Box::new(cand), alpha, trial as usize + 1);
            }
        }
        alpha *= settings.backtrack;
    }
    Step::Rejected(settings.line_search_steps as usize + 1)
}

fn linearize_all(dynamics: &Dynamics, traj: &Trajectory) -> Result<Vec<StepLinearization>, SolveError> {
    let mut solver = LowerSolver::new(dynamics.solver.clone());
    traj.solutions
        .iter()
        .enumerate()
        .map(|(t, sol)| {
            let problem = dynamics.problem(&traj.states[t], &traj.controls[t], traj.kappa)?;
            solver.linearize_step(&problem, sol)
        })
        .collect()
}

/// Optimize controls from `u_init` over `u_init.len()` steps.
pub fn optimize(
    x0: &State,
    weights: &CostWeights,
    u_init: &[Control],
    dynamics: &Dynamics,
    settings: &IlqrSettings,
) -> Result<Trajectory, IlqrError> {
    x0.check(&dynamics.model)?;
    weights.validate()?;
    weights.check_dims(dynamics.state_dim(), dynamics.control_dim())?;
    if u_init.is_empty() {
        return Err(IlqrError::Invalid("horizon must be at least 1".into()));
    }
    let stages = if settings.kappa_stages.is_empty() {
        vec![dynamics.solver.kappa_final]
    } else {
        settings.kappa_stages.clone()
    };
    let mut controls = u_init.to_vec();
    let mut history = Vec::new();
    let mut total_iterations = 0;
    let mut result = None;
    for (s, &kappa) in stages.iter().enumerate() {
        let last = s + 1 == stages.len();
        let cap = if last { settings.max_iterations } else { settings.stage_iterations };
        let traj = optimize_stage(x0, weights, &controls, result.as_ref(), kappa, dynamics, settings, cap, &mut history)?;
        total_iterations += traj.stats.iterations;
        controls = traj.controls.clone();
        result = Some(traj);
    }
    let mut traj = result.expect("at least one stage");
    traj.stats.iterations = total_iterations;
    traj.stats.history = history;
    Ok(traj)
}

#[allow(clippy::too_many_arguments)]
fn optimize_stage(
    x0: &State,
    weights: &CostWeights,
    controls: &[Control],
    previous: Option<&Trajectory>,
    kappa: f64,
    dynamics: &Dynamics,
    settings: &IlqrSettings,
    max_iterations: usize,
    history: &mut Vec<IterationRecord>,
) -> Result<Trajectory, IlqrError> {
    let mut traj = dynamics
        .simulate_near(x0, controls, kappa, weights, previous)
        .map_err(|source| IlqrError::Lower {
            source,
            incumbent: previous.map(|p| Box::new(p.clone())),
        })?;
    let mut reg = settings.reg_init;
    let mut converged = false;
    let mut iterations = 0;
    let mut gradient_norm = f64::NAN;
    while iterations < max_iterations {
        iterations += 1;
        let lins = linearize_all(dynamics, &traj).map_err(|source| IlqrError::Lower {
            source,
            incumbent: Some(Box::new(traj.clone())),
        })?;
        let costs = traj.expansions(weights, &dynamics.params);
        let gains = loop {
            match backward_pass(&costs, &lins, reg) {
                Ok(g) => break g,
                Err(IlqrError::NotPositiveDefinite { .. }) => {
                    reg *= settings.reg_up;
                    if reg > settings.reg_max {
                        return Err(IlqrError::RegularizationExhausted {
                            reg,
                            incumbent: Box::new(traj),
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        };
        gradient_norm = gains.gradient_norm;
        let expected = gains.expected_decrease(1.0);
        let mut record = IterationRecord {
            kappa,
            iteration: history.len() + 1,
            cost: traj.cost,
            delta_cost: 0.0,
            alpha: 0.0,
            reg,
            expected_decrease: expected,
            line_search_trials: 0,
            gradient_norm,
        };
        if expected.abs() < settings.rel_tol * (1.0 + traj.cost.abs()) * 1e-3 {
            // take the remaining full step when it does not cost anything
            if let Ok(cand) = forward_pass(dynamics, &traj, &gains, 1.0, weights) {
                if cand.cost.is_finite() && cand.cost <= traj.cost {
                    record.cost = cand.cost;
                    record.delta_cost = traj.cost - cand.cost;
                    record.alpha = 1.0;
                    record.line_search_trials = 1;
                    traj = cand;
                }
            }
            history.push(record);
            converged = true;
            break;
        }
        match line_search(dynamics, &traj, &gains, weights, settings) {
            Step::Accepted(cand, alpha, trials) => {
                let delta = traj.cost - cand.cost;
                record.cost = cand.cost;
                record.delta_cost = delta;
                record.alpha = alpha;
                record.line_search_trials = trials;
                history.push(record);
                traj = *cand;
                reg /= settings.reg_down;
                if delta < settings.rel_tol * (1.0 + traj.cost.abs()) {
                    converged = true;
                    break;
                }
            }
            Step::Rejected(trials) => {
                record.line_search_trials = trials;
                history.push(record);
                reg *= settings.reg_up;
                if reg > settings.reg_max {
                    break;
                }
            }
        }
    }
    traj.stats = OptimizerStats {
        iterations,
        converged,
        final_gradient_norm: gradient_norm,
        history: Vec::new(),
    };
    Ok(traj)
}

/// Write the iteration history as CSV.
pub fn write_iteration_log(path: &Path, stats: &OptimizerStats) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in &stats.history {
        w.serialize(rec)?;
    }
    w.flush()
}

/// Write the iteration history as CSV to any writer.
pub fn write_iteration_log_to<W: Write>(out: W, stats: &OptimizerStats) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rec in &stats.history {
        w.serialize(rec)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vec2;
    use approx::assert_relative_eq;

    fn point_weights(goal: Vec<f64>, w: f64) -> CostWeights {
        CostWeights::new(vec![1.0, 0.1, 0.1, 0.01, 0.01, 0.01], vec![0.1, 0.1], w, goal).unwrap()
    }

    #[test]
    fn cost_at_goal_is_zero() {
        let p = SystemParams::box_rotation();
        let goal = vec![0.0, -0.5, 0.0, 0.0, 0.0, 0.0];
        let wts = point_weights(goal.clone(), 10.0);
        // pusher touching the face so the clamped gap is zero
        let mut x = goal.clone();
        x[1] = -p.half_side() - p.pusher_radius;
        let wts = CostWeights {
            goal: DVector::from_vec(x.clone()),
            ..wts
        };
        let e = stage_cost(&DVector::from_vec(x), &DVector::zeros(2), &wts, &p);
        assert!(e.value().abs() < 1e-15);
        assert!(e.lx.norm() < 1e-15 && e.lu.norm() == 0.0);
    }

    #[test]
    fn quadratic_form_by_hand() {
        let p = SystemParams::box_rotation();
        let wts = CostWeights::new(vec![1.0, 0.1, 0.1], vec![1.0, 0.1], 0.0, vec![0.0; 3]).unwrap();
        let e = stage_cost(
            &DVector::from_vec(vec![0.1, 0.0, 0.0]),
            &DVector::from_vec(vec![1.0, 0.0]),
            &wts,
            &p,
        );
        assert_relative_eq!(e.value(), 1.01, epsilon = 1e-15);
    }

    #[test]
    fn cost_derivatives_match_finite_differences() {
        let p = SystemParams::box_rotation();
        let goal = vec![0.2, -0.02, 0.001, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let wts = CostWeights::new(
            vec![1.0, 0.1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01, 0.01],
            vec![0.1, 0.2, 0.3, 0.4],
            10.0,
            goal,
        )
        .unwrap();
        let mut seed = 7u64;
        let mut rnd = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..20 {
            let mut x = DVector::from_fn(10, |_, _| 0.01 * rnd());
            x[0] = 0.5 * rnd();
            x[1] = -0.02 + 0.002 * rnd();
            x[3] = -0.02 + 0.002 * rnd();
            let u = DVector::from_fn(4, |_, _| rnd());
            let e = stage_cost(&x, &u, &wts, &p);
            let eps = 1e-6;
            for j in 0..10 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += eps;
                xm[j] -= eps;
                let ep = stage_cost(&xp, &u, &wts, &p);
                let em = stage_cost(&xm, &u, &wts, &p);
                let g = (ep.value() - em.value()) / (2.0 * eps);
                assert!((g - e.lx[j]).abs() <= 1e-6 * (1.0 + g.abs()), "lx[{j}] {} vs {g}", e.lx[j]);
                let col = (&ep.lx - &em.lx) / (2.0 * eps);
                for i in 0..10 {
                    assert!(
                        (col[i] - e.lxx[(i, j)]).abs() <= 1e-6 * (1.0 + col[i].abs()),
                        "lxx[{i},{j}] {} vs {}",
                        e.lxx[(i, j)],
                        col[i]
                    );
                }
            }
            for j in 0..4 {
                let mut up = u.clone();
                let mut um = u.clone();
                up[j] += eps;
                um[j] -= eps;
                let g = (stage_cost(&x, &up, &wts, &p).value() - stage_cost(&x, &um, &wts, &p).value()) / (2.0 * eps);
                assert!((g - e.lu[j]).abs() <= 1e-6 * (1.0 + g.abs()));
            }
        }
    }

    #[test]
    fn tie_uses_lower_index() {
        let p = SystemParams::box_rotation();
        let x = [0.0, -0.02, 0.001, -0.02, -0.001, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(min_gap(&x, 2, &p).1, 0);
    }

    #[test]
    fn one_step_gains_match_hand_riccati() {
        // x+ = x + h u, cost q x^2 terminal, r u^2 running
        let (h, q, r) = (0.1, 2.0, 0.5);
        let lin = StepLinearization {
            a: DMatrix::identity(1, 1),
            b: DMatrix::from_element(1, 1, h),
        };
        let x0 = 1.0;
        let running = CostExpansion {
            terms: CostTerms::default(),
            lx: DVector::zeros(1),
            lu: DVector::zeros(1),
            lxx: DMatrix::zeros(1, 1),
            luu: DMatrix::from_element(1, 1, 2.0 * r),
        };
        let terminal = CostExpansion {
            terms: CostTerms::default(),
            lx: DVector::from_element(1, 2.0 * q * x0),
            lu: DVector::zeros(0),
            lxx: DMatrix::from_element(1, 1, 2.0 * q),
            luu: DMatrix::zeros(0, 0),
        };
        let g = backward_pass(&[running, terminal], &[lin], 0.0).unwrap();
        // minimize q (x0 + h u)^2 + r u^2 => u* = -q h x0 / (q h^2 + r)
        let u_star = -q * h * x0 / (q * h * h + r);
        assert_relative_eq!(g.k[0][0], u_star, epsilon = 1e-14);
        assert_relative_eq!(g.big_k[0][(0, 0)], -q * h / (q * h * h + r), epsilon = 1e-14);
    }

    #[test]
    fn control_without_effect_gives_zero_gains() {
        let lin = StepLinearization {
            a: DMatrix::identity(2, 2),
            b: DMatrix::zeros(2, 1),
        };
        let running = CostExpansion {
            terms: CostTerms::default(),
            lx: DVector::zeros(2),
            lu: DVector::zeros(1),
            lxx: DMatrix::zeros(2, 2),
            luu: DMatrix::from_element(1, 1, 0.2),
        };
        let terminal = CostExpansion {
            terms: CostTerms::default(),
            lx: DVector::from_vec(vec![1.0, -1.0]),
            lu: DVector::zeros(0),
            lxx: DMatrix::identity(2, 2),
            luu: DMatrix::zeros(0, 0),
        };
        let g = backward_pass(&[running.clone(), running, terminal], &[lin.clone(), lin], 1e-6).unwrap();
        for t in 0..2 {
            assert_eq!(g.k[t].norm(), 0.0);
            assert_eq!(g.big_k[t].norm(), 0.0);
        }
    }

    fn far_dynamics() -> Dynamics {
        Dynamics {
            params: SystemParams::box_rotation(),
            model: ContactModel::point(),
            step: 0.05,
            solver: SolverSettings::default(),
        }
    }

    #[test]
    fn zero_step_reproduces_incumbent() {
        let dynamics = far_dynamics();
        let x0 = State::at_rest(0.0, vec![Vec2::new(-0.5, 0.1)]);
        let wts = point_weights(vec![0.0, -0.5, 0.0, 0.0, 0.0, 0.0], 0.0);
        let controls = vec![Control { forces: vec![Vec2::new(0.3, -0.2)] }; 4];
        let traj = dynamics.simulate(&x0, &controls, 1e-8, &wts).unwrap();
        let gains = Gains {
            k: vec![DVector::from_vec(vec![5.0, -3.0]); 4],
            big_k: vec![DMatrix::from_element(2, 6, 0.7); 4],
            d1: 0.0,
            d2: 0.0,
            gradient_norm: 0.0,
        };
        let again = forward_pass(&dynamics, &traj, &gains, 0.0, &wts).unwrap();
        assert_eq!(again.states, traj.states);
        assert_eq!(again.cost.to_bits(), traj.cost.to_bits());
    }

    #[test]
    fn already_at_goal_stays() {
        let dynamics = far_dynamics();
        let x0 = State::at_rest(0.0, vec![Vec2::new(-0.5, 0.0)]);
        let wts = point_weights(x0.to_vec(), 0.0);
        let u = vec![Control::zeros(1); 5];
        let traj = optimize(&x0, &wts, &u, &dynamics, &IlqrSettings::default()).unwrap();
        assert!(traj.cost < 1e-30, "cost {}", traj.cost);
        assert!(traj.controls.iter().all(|c| c.forces[0].norm() == 0.0));
    }

    #[test]
    fn cost_is_sum_of_terms() {
        let dynamics = far_dynamics();
        let x0 = State::at_rest(0.0, vec![Vec2::new(-0.5, 0.1)]);
        let wts = point_weights(vec![0.1, -0.5, 0.0, 0.0, 0.0, 0.0], 10.0);
        let controls = vec![Control { forces: vec![Vec2::new(0.3, -0.2)] }; 6];
        let traj = dynamics.simulate(&x0, &controls, 1e-8, &wts).unwrap();
        let sum: f64 = traj.per_step_cost.iter().map(CostTerms::total).sum();
        assert!((sum - traj.cost).abs() <= 1e-10);
        assert_eq!(traj.per_step_cost.len(), 7);
    }
}
