//! One implicit time step of the pusher–box system with contact.
//!
//! The step is defined as the solution of a relaxed complementarity system
//! `R(z; data, kappa) = 0` in the decision vector
//!
//! ```text
//! z = [ v+_1 .. v+_N | omega+ | fn_1 .. fn_N | ft+_1, ft-_1 .. | beta_1 .. beta_N | g+, g-, sigma ]
//! ```
//!
//! holding next pusher velocities, next box angular velocity, normal and
//! split tangential contact impulses, sliding slacks, and the ground-torque
//! impulse pair with its slack. Positions are advanced semi-implicitly,
//! `q+ = q + h v+`.
//!
//! Contact frames and lever arms are taken at the start of the step. The gap
//! is evaluated exactly at the next configuration, `phi(q+)`.
//!
//! The system is solved by damped Newton on a smoothed Fischer-Burmeister
//! reformulation of the pairs along a decreasing `kappa` schedule, polished on
//! `R` itself, and differentiated with the implicit-function theorem at the
//! converged point.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    corner_friction_torque, face_normal, face_tangent, Control, ContactKind, ContactModel,
    ModelError, State, SystemParams, Vec2,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("Newton did not converge at kappa = {kappa:e}: residual {residual:e} after {iterations} iterations")]
    MaxIterationsExceeded {
        kappa: f64,
        residual: f64,
        iterations: usize,
    },
    #[error("non-finite iterate at kappa = {kappa:e}, iteration {iteration}")]
    NonFiniteIterate { kappa: f64, iteration: usize },
    #[error("singular residual Jacobian (condition estimate {condition:e})")]
    SingularJacobian { condition: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub kappa_init: f64,
    pub kappa_final: f64,
    /// Geometric reduction factor of the relaxation between stages.
    pub kappa_factor: f64,
    /// Newton iterations allowed per relaxation stage.
    pub max_iterations: usize,
    /// Infinity-norm residual tolerance of the final stage.
    pub tol: f64,
    pub backtrack: f64,
    /// Fraction-to-the-boundary parameter.
    pub boundary_fraction: f64,
    /// A contact is left out of the step when the impulse its relaxed
    /// complementarity would produce (`kappa / gap`) stays below this.
    pub activation_impulse: f64,
    /// Extra Newton steps taken after the final tolerance is met, while they
    /// keep reducing the residual.
    pub polish_iterations: usize,
    /// A stage is abandoned when the residual norm has not halved over this
    /// many iterations.
    pub stall_window: usize,
    /// Stage insertions allowed before a step is reported as failed.
    pub max_retries: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            kappa_init: 1e-3,
            kappa_final: 1e-8,
            kappa_factor: 0.1,
            max_iterations: 100,
            tol: 1e-8,
            backtrack: 0.5,
            boundary_fraction: 0.99,
            activation_impulse: 1e-6,
            polish_iterations: 2,
            stall_window: 15,
            max_retries: 12,
        }
    }
}

impl SolverSettings {
    /// Relaxation values visited when solving to `target`.
    pub fn schedule(&self, target: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = self.kappa_init;
        while k > target * (1.0 + 1e-9) {
            out.push(k);
            k *= self.kappa_factor;
        }
        out.push(target);
        out
    }

    /// Gap beyond which a contact is left out of the step at relaxation `kappa`.
    pub fn activation_gap(&self, kappa: f64) -> f64 {
        kappa / self.activation_impulse
    }
}

/// Index map of the decision vector for `n` pusher points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub n_points: usize,
}

impl VarLayout {
    pub fn new(n_points: usize) -> Self {
        Self { n_points }
    }
    pub fn dim(&self) -> usize {
        6 * self.n_points + 4
    }
    pub fn vel(&self, i: usize) -> usize {
        2 * i
    }
    pub fn omega(&self) -> usize {
        2 * self.n_points
    }
    pub fn normal(&self, i: usize) -> usize {
        2 * self.n_points + 1 + i
    }
    pub fn tangent_pos(&self, i: usize) -> usize {
        3 * self.n_points + 1 + 2 * i
    }
    pub fn tangent_neg(&self, i: usize) -> usize {
        3 * self.n_points + 2 + 2 * i
    }
    pub fn slip(&self, i: usize) -> usize {
        5 * self.n_points + 1 + i
    }
    pub fn ground_pos(&self) -> usize {
        6 * self.n_points + 1
    }
    pub fn ground_neg(&self) -> usize {
        6 * self.n_points + 2
    }
    pub fn ground_slack(&self) -> usize {
        6 * self.n_points + 3
    }

    /// Length of the flat state vector.
    pub fn state_dim(&self) -> usize {
        State::dim(self.n_points)
    }
    pub fn control_dim(&self) -> usize {
        2 * self.n_points
    }
    // Flat state vector offsets, see `State::to_vec`.
    fn x_theta(&self) -> usize {
        0
    }
    fn x_pos(&self, i: usize) -> usize {
        1 + 2 * i
    }
    fn x_omega(&self) -> usize {
        1 + 2 * self.n_points
    }
    fn x_vel(&self, i: usize) -> usize {
        2 + 2 * self.n_points + 2 * i
    }
}

/// Problem data of one step.
#[derive(Debug, Clone)]
pub struct LowerProblem {
    pub state: State,
    pub control: Control,
    pub step: f64,
    pub params: SystemParams,
    pub model: ContactModel,
    pub layout: VarLayout,
    /// Target relaxation of the solve.
    pub kappa: f64,
    /// Contacts included in the complementarity system when assembling the
    /// residual directly. `solve_step` picks its own active set.
    pub active: Vec<bool>,
}

impl LowerProblem {
    pub fn new(
        state: State,
        control: Control,
        step: f64,
        params: SystemParams,
        model: ContactModel,
        kappa: f64,
    ) -> Result<Self, SolveError> {
        state.check(&model)?;
        let n = model.n_points();
        if control.forces.len() != n {
            return Err(ModelError::DimensionMismatch {
                expected: n,
                found: control.forces.len(),
            }
            .into());
        }
        Ok(Self {
            state,
            control,
            step,
            params,
            model,
            layout: VarLayout::new(n),
            kappa,
            active: vec![true; n],
        })
    }

    fn max_ground_torque(&self) -> f64 {
        corner_friction_torque(self.state.omega_box, self.params.box_weight(), &self.params).max_torque
    }

    fn blocks(&self, active: &[bool]) -> Blocks {
        Blocks {
            contact: active.to_vec(),
            contact_friction: self.params.mu_p > 0.0,
            ground: self.max_ground_torque() > 0.0,
        }
    }
}

/// Which complementarity blocks take part in the system. Variables of
/// disabled blocks are pinned to zero.
#[derive(Debug, Clone)]
struct Blocks {
    contact: Vec<bool>,
    contact_friction: bool,
    ground: bool,
}

impl Blocks {
    fn friction(&self, i: usize) -> bool {
        self.contact[i] && self.contact_friction
    }
}

/// Per-contact forces (impulses divided by the step).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactForce {
    pub normal: f64,
    pub tangent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub kappa: f64,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct LowerSolution {
    pub next_state: State,
    pub forces: Vec<ContactForce>,
    pub ground_torque: f64,
    /// Infinity norm of the residual at the returned point.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Full decision vector.
    pub z: DVector<f64>,
    pub active: Vec<bool>,
    /// Relaxation the solution satisfies.
    pub kappa: f64,
    pub stages: Vec<StageStats>,
}

impl LowerSolution {
    pub fn normal_impulses(&self) -> Vec<f64> {
        let l = VarLayout::new(self.active.len());
        (0..l.n_points).map(|i| self.z[l.normal(i)]).collect()
    }
}

/// Dynamics Jacobians of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLinearization {
    /// d x_{t+1} / d x_t
    pub a: DMatrix<f64>,
    /// d x_{t+1} / d u_t
    pub b: DMatrix<f64>,
}

struct Eval {
    r: DVector<f64>,
    jz: DMatrix<f64>,
    /// d R / d [x, u]
    jp: Option<DMatrix<f64>>,
}

/// Residual `R(z; data, kappa)` with the contacts of `problem.active`.
pub fn assemble_residual(z: &DVector<f64>, problem: &LowerProblem, kappa: f64) -> DVector<f64> {
    let blocks = problem.blocks(&problem.active);
    evaluate(problem, &blocks, z, kappa, false, false).r
}

/// Residual Jacobian `dR/dz` with the contacts of `problem.active`.
pub fn residual_jacobian(z: &DVector<f64>, problem: &LowerProblem, kappa: f64) -> DMatrix<f64> {
    let blocks = problem.blocks(&problem.active);
    evaluate(problem, &blocks, z, kappa, true, false).jz
}

struct FrozenSpring {
    /// Force on the second point.
    force: Vec2,
    /// d force / d (p2' - p1'), next positions
    d_next: Matrix2<f64>,
    /// d force / d (v2' - v1')
    d_rel_vel: Matrix2<f64>,
    /// d force / d (p2 - p1) at fixed next velocities
    d_sep: Matrix2<f64>,
}

/// Spring–damper force at separation `r_next` and relative velocity `dv`,
/// acting along the direction of the current separation.
fn frozen_spring(problem: &LowerProblem, r_next: &Vec2, dv: &Vec2) -> FrozenSpring {
    let m = &problem.model;
    let r = problem.state.pusher_pos[1] - problem.state.pusher_pos[0];
    let d = r.norm();
    let (e, proj) = if d > crate::model::DIRECTION_EPS {
        let e = r / d;
        (e, (Matrix2::identity() - e * e.transpose()) / d)
    } else {
        (face_tangent(problem.state.theta_box), Matrix2::zeros())
    };
    let eet = e * e.transpose();
    let magnitude = m.stiffness * (e.dot(r_next) - m.rest_length) + m.damping * e.dot(dv);
    let d_dir = -magnitude * Matrix2::identity() - e * (m.stiffness * r_next + m.damping * dv).transpose();
    let d_next = -m.stiffness * eet;
    FrozenSpring {
        force: -magnitude * e,
        d_next,
        d_rel_vel: -m.damping * eet,
        d_sep: d_next + d_dir * proj,
    }
}

fn evaluate(
    problem: &LowerProblem,
    blocks: &Blocks,
    z: &DVector<f64>,
    kappa: f64,
    with_jz: bool,
    with_jp: bool,
) -> Eval {
    let l = problem.layout;
    let n = l.n_points;
    let k = l.dim();
    let np = l.state_dim() + l.control_dim();
    let x = &problem.state;
    let h = problem.step;
    let pr = &problem.params;
    let mp = pr.pusher_mass;
    let inertia = pr.box_inertia;
    let a_half = pr.half_side();

    let mut r = DVector::zeros(k);
    let mut jz = if with_jz { DMatrix::zeros(k, k) } else { DMatrix::zeros(0, 0) };
    let mut jp = if with_jp { Some(DMatrix::zeros(k, np)) } else { None };
    let u0 = l.state_dim();

    let omega_next = z[l.omega()];
    let nrm = face_normal(x.theta_box);
    let tan = face_tangent(x.theta_box);
    let vel: Vec<Vec2> = (0..n).map(|i| Vec2::new(z[l.vel(i)], z[l.vel(i) + 1])).collect();
    let pos: Vec<Vec2> = (0..n).map(|i| x.pusher_pos[i] + h * vel[i]).collect();

    // Helpers writing 2-vectors into a column pair / row pair.
    fn put_col(m: &mut DMatrix<f64>, row: usize, col: usize, v: &Vec2, scale: f64) {
        m[(row, col)] += scale * v.x;
        m[(row + 1, col)] += scale * v.y;
    }
    fn put_row(m: &mut DMatrix<f64>, row: usize, col: usize, v: &Vec2, scale: f64) {
        m[(row, col)] += scale * v.x;
        m[(row, col + 1)] += scale * v.y;
    }
    fn put_block(m: &mut DMatrix<f64>, row: usize, col: usize, b: &Matrix2<f64>, scale: f64) {
        for i in 0..2 {
            for j in 0..2 {
                m[(row + i, col + j)] += scale * b[(i, j)];
            }
        }
    }

    // Spring forces on each point at the next configuration, along the axis of
    // the current one.
    let mut spring = vec![Vec2::zeros(); n];
    let mut spring_dnext = Matrix2::zeros();
    let mut spring_dvel = Matrix2::zeros();
    let mut spring_dsep = Matrix2::zeros();
    if problem.model.kind == ContactKind::Fdlc {
        let s = frozen_spring(problem, &(pos[1] - pos[0]), &(vel[1] - vel[0]));
        spring[1] = s.force;
        spring[0] = -s.force;
        spring_dnext = s.d_next;
        spring_dvel = s.d_rel_vel;
        spring_dsep = s.d_sep;
    }

    // (1) pusher momentum
    for i in 0..n {
        let row = l.vel(i);
        let fn_i = z[l.normal(i)];
        let ft_i = z[l.tangent_pos(i)] - z[l.tangent_neg(i)];
        let res = mp * (vel[i] - x.pusher_vel[i]) - h * problem.control.forces[i] - fn_i * nrm - ft_i * tan - h * spring[i];
        r[row] = res.x;
        r[row + 1] = res.y;
        let d_theta = -(fn_i * tan - ft_i * nrm);
        if with_jz {
            put_block(&mut jz, row, l.vel(i), &Matrix2::identity(), mp);
            put_col(&mut jz, row, l.normal(i), &nrm, -1.0);
            put_col(&mut jz, row, l.tangent_pos(i), &tan, -1.0);
            put_col(&mut jz, row, l.tangent_neg(i), &tan, 1.0);
        }
        if let Some(jp) = jp.as_mut() {
            put_col(jp, row, l.x_theta(), &d_theta, 1.0);
            put_block(jp, row, l.x_vel(i), &Matrix2::identity(), -mp);
            put_block(jp, row, u0 + 2 * i, &Matrix2::identity(), -h);
        }
        if problem.model.kind == ContactKind::Fdlc {
            // force on point 1 is -f(p2 - p1, v2 - v1), on point 2 it is +f
            let sign = if i == 1 { 1.0 } else { -1.0 };
            for j in 0..2 {
                let dir = if j == 1 { 1.0 } else { -1.0 };
                let s = sign * dir;
                if with_jz {
                    put_block(&mut jz, row, l.vel(j), &(h * spring_dnext + spring_dvel), -h * s);
                }
                if let Some(jp) = jp.as_mut() {
                    put_block(jp, row, l.x_pos(j), &spring_dsep, -h * s);
                }
            }
        }
    }

    // (2) box angular momentum
    {
        let row = l.omega();
        let mut res = inertia * (omega_next - x.omega_box);
        for i in 0..n {
            let fn_i = z[l.normal(i)];
            let ft_i = z[l.tangent_pos(i)] - z[l.tangent_neg(i)];
            let lever = tan.dot(&x.pusher_pos[i]);
            res -= fn_i * lever - ft_i * a_half;
            if with_jz {
                jz[(row, l.normal(i))] = -lever;
                jz[(row, l.tangent_pos(i))] = a_half;
                jz[(row, l.tangent_neg(i))] = -a_half;
            }
            if let Some(jp) = jp.as_mut() {
                jp[(row, l.x_theta())] += fn_i * nrm.dot(&x.pusher_pos[i]);
                put_row(jp, row, l.x_pos(i), &tan, -fn_i);
            }
        }
        res -= z[l.ground_pos()] - z[l.ground_neg()];
        r[row] = res;
        if with_jz {
            jz[(row, l.omega())] += inertia;
            jz[(row, l.ground_pos())] = -1.0;
            jz[(row, l.ground_neg())] = 1.0;
        }
        if let Some(jp) = jp.as_mut() {
            jp[(row, l.x_omega())] = -inertia;
        }
    }

    // (3)-(5) relaxed complementarity, one row per pair
    for pair in complementarity_pairs(problem, blocks, z) {
        let d = pair.dual;
        r[d] = z[d] * pair.value - kappa;
        if with_jz {
            jz[(d, d)] += pair.value;
            for &(c, v) in &pair.dz {
                jz[(d, c)] += z[d] * v;
            }
        }
        if let Some(jp) = jp.as_mut() {
            for &(c, v) in &pair.dp {
                jp[(d, c)] += z[d] * v;
            }
        }
    }
    for idx in pinned_indices(&l, blocks) {
        r[idx] = z[idx];
        if with_jz {
            jz[(idx, idx)] = 1.0;
        }
    }

    Eval { r, jz, jp }
}

/// A complementarity pair `z[dual] * value(z) = kappa` with the sparse
/// gradients of `value` with respect to `z` and to `[x, u]`.
#[derive(Debug, Clone)]
struct Pair {
    dual: usize,
    value: f64,
    dz: Vec<(usize, f64)>,
    dp: Vec<(usize, f64)>,
}

fn complementarity_pairs(problem: &LowerProblem, blocks: &Blocks, z: &DVector<f64>) -> Vec<Pair> {
    let l = problem.layout;
    let h = problem.step;
    let pr = &problem.params;
    let a_half = pr.half_side();
    let omega_next = z[l.omega()];
    let nrm = face_normal(problem.state.theta_box);
    let tan = face_tangent(problem.state.theta_box);
    let mut out = Vec::with_capacity(4 * l.n_points + 3);
    for i in 0..l.n_points {
        if !blocks.contact[i] {
            continue;
        }
        let v = Vec2::new(z[l.vel(i)], z[l.vel(i) + 1]);
        let p = problem.state.pusher_pos[i];
        let (vx, vy) = (l.vel(i), l.vel(i) + 1);
        let (px, py) = (l.x_pos(i), l.x_pos(i) + 1);
        // gap at the next configuration
        let theta_next = problem.state.theta_box + h * omega_next;
        let nrm_next = face_normal(theta_next);
        let p_next = p + h * v;
        let lever_next = face_tangent(theta_next).dot(&p_next);
        out.push(Pair {
            dual: l.normal(i),
            value: nrm_next.dot(&p_next) - a_half - pr.pusher_radius,
            dz: vec![(vx, h * nrm_next.x), (vy, h * nrm_next.y), (l.omega(), h * lever_next)],
            dp: vec![(l.x_theta(), lever_next), (px, nrm_next.x), (py, nrm_next.y)],
        });
        if !blocks.friction(i) {
            continue;
        }
        let beta = z[l.slip(i)];
        let vt = tan.dot(&v) - a_half * omega_next;
        let n_dot_v = nrm.dot(&v);
        let dvt_domega = -a_half;
        for (dual, s) in [(l.tangent_pos(i), 1.0), (l.tangent_neg(i), -1.0)] {
            out.push(Pair {
                dual,
                value: beta + s * vt,
                dz: vec![(l.slip(i), 1.0), (vx, s * tan.x), (vy, s * tan.y), (l.omega(), s * dvt_domega)],
                dp: vec![(l.x_theta(), -s * n_dot_v)],
            });
        }
        out.push(Pair {
            dual: l.slip(i),
            value: pr.mu_p * z[l.normal(i)] - z[l.tangent_pos(i)] - z[l.tangent_neg(i)],
            dz: vec![(l.normal(i), pr.mu_p), (l.tangent_pos(i), -1.0), (l.tangent_neg(i), -1.0)],
            dp: Vec::new(),
        });
    }
    if blocks.ground {
        let sigma = z[l.ground_slack()];
        for (dual, s) in [(l.ground_pos(), 1.0), (l.ground_neg(), -1.0)] {
            out.push(Pair {
                dual,
                value: sigma + s * omega_next,
                dz: vec![(l.ground_slack(), 1.0), (l.omega(), s)],
                dp: Vec::new(),
            });
        }
        out.push(Pair {
            dual: l.ground_slack(),
            value: h * problem.max_ground_torque() - z[l.ground_pos()] - z[l.ground_neg()],
            dz: vec![(l.ground_pos(), -1.0), (l.ground_neg(), -1.0)],
            dp: Vec::new(),
        });
    }
    out
}

/// Variables held at zero because their block is switched off.
fn pinned_indices(l: &VarLayout, blocks: &Blocks) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..l.n_points {
        if !blocks.contact[i] {
            out.push(l.normal(i));
        }
        if !blocks.friction(i) {
            out.extend([l.tangent_pos(i), l.tangent_neg(i), l.slip(i)]);
        }
    }
    if !blocks.ground {
        out.extend([l.ground_pos(), l.ground_neg(), l.ground_slack()]);
    }
    out
}

/// Values and duals of all complementarity pairs; all must stay positive.
fn interior_quantities(problem: &LowerProblem, blocks: &Blocks, z: &DVector<f64>, out: &mut Vec<f64>) {
    out.clear();
    for p in complementarity_pairs(problem, blocks, z) {
        out.push(z[p.dual]);
        out.push(p.value);
    }
}

/// Residual and Jacobian with every pair row replaced by the smoothed
/// Fischer-Burmeister form `a + b - sqrt(a^2 + b^2 + 2 kappa)`, which
/// vanishes exactly when `a, b > 0` and `a b = kappa`.
fn evaluate_fb(problem: &LowerProblem, blocks: &Blocks, z: &DVector<f64>, kappa: f64) -> (DVector<f64>, DMatrix<f64>) {
    let Eval { mut r, mut jz, .. } = evaluate(problem, blocks, z, kappa, true, false);
    for p in complementarity_pairs(problem, blocks, z) {
        let d = p.dual;
        let (a, b) = (z[d], p.value);
        let rho = (a * a + b * b + 2.0 * kappa).sqrt();
        r[d] = a + b - rho;
        jz.row_mut(d).fill(0.0);
        jz[(d, d)] = 1.0 - a / rho;
        for &(c, v) in &p.dz {
            jz[(d, c)] += (1.0 - b / rho) * v;
        }
    }
    (r, jz)
}

/// Starting point of the first stage: velocities from the warm start (or
/// the current state), sliding slacks at least `sqrt(kappa)`, duals centered.
fn initial_point(
    problem: &LowerProblem,
    blocks: &Blocks,
    warm_start: Option<&LowerSolution>,
    kappa: f64,
) -> DVector<f64> {
    let l = problem.layout;
    let x = &problem.state;
    let pr = &problem.params;
    let floor = kappa.sqrt();
    let mut z = DVector::zeros(l.dim());

    let mut omega_next = x.omega_box;
    let mut vel: Vec<Vec2> = x.pusher_vel.clone();
    if let Some(w) = warm_start {
        let candidate: Vec<Vec2> = (0..l.n_points)
            .map(|i| Vec2::new(w.z[l.vel(i)], w.z[l.vel(i) + 1]))
            .collect();
        let w_omega = w.z[l.omega()];
        if w_omega.is_finite() && candidate.iter().all(|v| v.iter().all(|c| c.is_finite())) {
            omega_next = w_omega;
            vel = candidate;
        }
    }
    let tan = face_tangent(x.theta_box);
    z[l.omega()] = omega_next;
    for i in 0..l.n_points {
        z[l.vel(i)] = vel[i].x;
        z[l.vel(i) + 1] = vel[i].y;
        if blocks.friction(i) {
            let vt = tan.dot(&vel[i]) - pr.half_side() * omega_next;
            z[l.slip(i)] = vt.abs() + floor;
        }
    }
    if blocks.ground {
        z[l.ground_slack()] = omega_next.abs() + floor;
    }
    // Pure duals first (normal and tangential impulses, ground impulses),
    // then the pairs whose value depends on them.
    let slack_duals = |l: &VarLayout, d: usize| {
        (0..l.n_points).any(|i| d == l.slip(i)) || d == l.ground_slack()
    };
    for p in complementarity_pairs(problem, blocks, &z) {
        if !slack_duals(&l, p.dual) {
            z[p.dual] = kappa / p.value.max(floor);
        }
    }
    z
}

/// Starting point taken from a converged iterate of a nearby problem, with
/// the entries pinned by this active set cleared.
fn warm_point(problem: &LowerProblem, blocks: &Blocks, warm: &DVector<f64>) -> DVector<f64> {
    let mut z = warm.clone();
    for i in pinned_indices(&problem.layout, blocks) {
        z[i] = 0.0;
    }
    z
}

/// Merits remembered by the nonmonotone line search.
const NONMONOTONE: usize = 5;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Damped-Newton solver for the step problem. Holds scratch buffers, so one
/// instance per thread.
#[derive(Debug, Clone, Default)]
pub struct LowerSolver {
    pub settings: SolverSettings,
    scratch: Vec<f64>,
    scratch_trial: Vec<f64>,
}

impl LowerSolver {
    pub fn new(settings: SolverSettings) -> Self {
        Self {
            settings,
            scratch: Vec::new(),
            scratch_trial: Vec::new(),
        }
    }

    /// Solve one step. The active contact set is chosen from the current
    /// gap, a free-flight prediction and a post-solve check, so contacts that
    /// stay farther than [`SolverSettings::activation_gap`] do not perturb the
    /// free motion.
    pub fn solve_step(
        &mut self,
        problem: &LowerProblem,
        warm_start: Option<&LowerSolution>,
    ) -> Result<LowerSolution, SolveError> {
        let l = problem.layout;
        if let Some(w) = warm_start {
            if w.z.len() != l.dim() {
                return Err(ModelError::DimensionMismatch {
                    expected: l.dim(),
                    found: w.z.len(),
                }
                .into());
            }
        }
        let margin = self.settings.activation_gap(problem.kappa);
        let x = &problem.state;
        let h = problem.step;
        let theta_pred = x.theta_box + h * x.omega_box;
        let mut active: Vec<bool> = (0..l.n_points)
            .map(|i| {
                let now = crate::model::gap(&x.pusher_pos[i], x.theta_box, &problem.params);
                let v_pred = x.pusher_vel[i] + h / problem.params.pusher_mass * problem.control.forces[i];
                let pred = crate::model::gap(&(x.pusher_pos[i] + h * v_pred), theta_pred, &problem.params);
                now <= margin || pred <= margin
            })
            .collect();
        loop {
            let sol = self.solve_with(problem, &active, warm_start)?;
            let mut changed = false;
            for i in 0..l.n_points {
                if !active[i]
                    && crate::model::gap(&sol.next_state.pusher_pos[i], sol.next_state.theta_box, &problem.params)
                        <= margin
                {
                    active[i] = true;
                    changed = true;
                }
            }
            if !changed {
                return Ok(sol);
            }
        }
    }

    /// Solve with a fixed set of active contacts.
    ///
    /// A warm start carrying a full iterate is tried first, following the
    /// relaxation down from the warm start's own. Otherwise, or if that
    /// fails, the schedule starts cold at `kappa_init`. A stage that fails is
    /// retried: the first cold stage by starting one decade higher in
    /// `kappa`, later stages by inserting the geometric midpoint after the
    /// last converged stage.
    pub fn solve_with(
        &mut self,
        problem: &LowerProblem,
        active: &[bool],
        warm_start: Option<&LowerSolution>,
    ) -> Result<LowerSolution, SolveError> {
        let blocks = problem.blocks(active);
        if let Some(w) = warm_start.filter(|w| w.z.iter().all(|v| v.is_finite()) && w.kappa.is_finite()) {
            let start = w.kappa.max(problem.kappa);
            let mut schedule = vec![start];
            while schedule[schedule.len() - 1] > problem.kappa * (1.0 + 1e-9) {
                let next = (schedule[schedule.len() - 1] * self.settings.kappa_factor).max(problem.kappa);
                schedule.push(next);
            }
            let z = warm_point(problem, &blocks, &w.z);
            if let Ok(sol) = self.follow(problem, active, &blocks, schedule, z, None) {
                return Ok(sol);
            }
        }
        let schedule = self.settings.schedule(problem.kappa);
        let z = initial_point(problem, &blocks, warm_start, schedule[0]);
        self.follow(problem, active, &blocks, schedule, z, Some(warm_start))
    }

    /// Track the relaxation path through `schedule`, then finish on the
    /// original residual. `cold` enables restarting one decade higher when
    /// the first stage fails.
    fn follow(
        &mut self,
        problem: &LowerProblem,
        active: &[bool],
        blocks: &Blocks,
        mut schedule: Vec<f64>,
        mut z: DVector<f64>,
        cold: Option<Option<&LowerSolution>>,
    ) -> Result<LowerSolution, SolveError> {
        let mut saved = z.clone();
        let mut stages = Vec::with_capacity(schedule.len());
        let mut total = 0;
        let mut retries = 0;
        let mut k = 0;
        while k < schedule.len() {
            let kappa = schedule[k];
            let tol = if k + 1 == schedule.len() { self.settings.tol } else { 0.1 * kappa };
            match self.newton_fb(problem, blocks, &mut z, kappa, tol) {
                Ok((it, res)) => {
                    total += it;
                    stages.push(StageStats {
                        kappa,
                        iterations: it,
                        residual: res,
                    });
                    saved = z.clone();
                    k += 1;
                }
                Err(e) => {
                    retries += 1;
                    if retries > self.settings.max_retries {
                        return Err(e);
                    }
                    if let SolveError::MaxIterationsExceeded { iterations, .. } = e {
                        total += iterations;
                    }
                    if k > 0 {
                        schedule.insert(k, (schedule[k - 1] * kappa).sqrt());
                        z = saved.clone();
                    } else if let Some(warm_start) = cold {
                        schedule.insert(0, 10.0 * kappa);
                        z = initial_point(problem, blocks, warm_start, schedule[0]);
                    } else {
                        return Err(e);
                    }
                }
            }
        }
        let kappa = problem.kappa;
        let (it, residual) = self.newton(problem, blocks, &mut z, kappa, self.settings.tol)?;
        total += it;
        if let Some(last) = stages.last_mut() {
            last.iterations += it;
            last.residual = residual;
        }
        Ok(self.package(problem, active, z, residual, total, stages))
    }

    /// Damped Newton on the smoothed Fischer-Burmeister system. Needs no
    /// interior safeguard; falls back to Levenberg-Marquardt directions when
    /// the Newton direction gives no decrease.
    fn newton_fb(
        &mut self,
        problem: &LowerProblem,
        blocks: &Blocks,
        z: &mut DVector<f64>,
        kappa: f64,
        tol: f64,
    ) -> Result<(usize, f64), SolveError> {
        let st = self.settings.clone();
        let (mut r, mut jac) = evaluate_fb(problem, blocks, z, kappa);
        let mut iterations = 0;
        let mut merits = Vec::with_capacity(st.max_iterations + 1);
        loop {
            let res_inf = inf_norm(&r);
            if !res_inf.is_finite() {
                return Err(SolveError::NonFiniteIterate { kappa, iteration: iterations });
            }
            if res_inf <= tol {
                return Ok((iterations, res_inf));
            }
            merits.push(r.norm());
            let window = st.stall_window;
            let stalled = merits.len() > window && merits[merits.len() - 1] > 0.5 * merits[merits.len() - 1 - window];
            if stalled || iterations >= st.max_iterations {
                return Err(SolveError::MaxIterationsExceeded {
                    kappa,
                    residual: res_inf,
                    iterations,
                });
            }
            iterations += 1;
            let reference = merits[merits.len().saturating_sub(NONMONOTONE)..]
                .iter()
                .fold(0.0_f64, |a, &b| a.max(b));
            let try_dir = |d: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
                let mut alpha = 1.0;
                for _ in 0..40 {
                    let zt = &*z + alpha * d;
                    let (rt, jt) = evaluate_fb(problem, blocks, &zt, kappa);
                    let m = rt.norm();
                    if m.is_finite() && m <= (1.0 - 1e-4 * alpha) * reference {
                        return Some((zt, rt, jt));
                    }
                    alpha *= st.backtrack;
                }
                None
            };
            let mut accepted = jac
                .clone()
                .lu()
                .solve(&(-&r))
                .filter(|d| d.iter().all(|v| v.is_finite()))
                .and_then(|d| try_dir(&d));
            if accepted.is_none() {
                let jtj = jac.transpose() * &jac;
                let grad = jac.transpose() * &r;
                let mut mu = 1e-6;
                while accepted.is_none() && mu <= 1e6 {
                    let mut m = jtj.clone();
                    for i in 0..m.nrows() {
                        m[(i, i)] += mu * jtj[(i, i)].max(1e-12);
                    }
                    if let Some(c) = m.cholesky() {
                        accepted = try_dir(&(-c.solve(&grad)));
                    }
                    mu *= 10.0;
                }
            }
            match accepted {
                Some((zt, rt, jt)) => {
                    *z = zt;
                    r = rt;
                    jac = jt;
                }
                None => {
                    return Err(SolveError::MaxIterationsExceeded {
                        kappa,
                        residual: res_inf,
                        iterations,
                    })
                }
            }
        }
    }

    /// Newton on the residual itself, used to finish the last stage.
    fn newton(
        &mut self,
        problem: &LowerProblem,
        blocks: &Blocks,
        z: &mut DVector<f64>,
        kappa: f64,
        tol: f64,
    ) -> Result<(usize, f64), SolveError> {
        let st = self.settings.clone();
        let mut iterations = 0;
        let mut eval = evaluate(problem, blocks, z, kappa, true, false);
        let mut res_inf = inf_norm(&eval.r);
        let mut polished = 0;
        loop {
            if !res_inf.is_finite() {
                return Err(SolveError::NonFiniteIterate { kappa, iteration: iterations });
            }
            let converged = res_inf <= tol;
            if converged && polished >= st.polish_iterations {
                return Ok((iterations, res_inf));
            }
            if iterations >= st.max_iterations {
                if converged {
                    return Ok((iterations, res_inf));
                }
                return Err(SolveError::MaxIterationsExceeded {
                    kappa,
                    residual: res_inf,
                    iterations,
                });
            }
            let dz = match eval.jz.clone().lu().solve(&(-&eval.r)) {
                Some(d) if d.iter().all(|v| v.is_finite()) => d,
                _ if converged => return Ok((iterations, res_inf)),
                _ => return Err(SolveError::NonFiniteIterate { kappa, iteration: iterations }),
            };
            iterations += 1;

            interior_quantities(problem, blocks, z, &mut self.scratch);
            let merit = eval.r.norm();
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-14 {
                let trial = &*z + alpha * &dz;
                interior_quantities(problem, blocks, &trial, &mut self.scratch_trial);
                let inside = self
                    .scratch
                    .iter()
                    .zip(&self.scratch_trial)
                    .all(|(s0, s1)| *s1 >= (1.0 - st.boundary_fraction) * s0);
                if inside {
                    let e = evaluate(problem, blocks, &trial, kappa, true, false);
                    let m = e.r.norm();
                    if m.is_finite() && m <= (1.0 - 1e-4 * alpha) * merit {
                        accepted = Some((trial, e));
                        break;
                    }
                }
                alpha *= st.backtrack;
            }
            match accepted {
                Some((trial, e)) => {
                    let r_new = inf_norm(&e.r);
                    if converged && r_new >= res_inf {
                        return Ok((iterations, res_inf));
                    }
                    *z = trial;
                    eval = e;
                    res_inf = r_new;
                    if converged {
                        polished += 1;
                    }
                }
                None if converged => return Ok((iterations, res_inf)),
                None => {
                    return Err(SolveError::MaxIterationsExceeded {
                        kappa,
                        residual: res_inf,
                        iterations,
                    })
                }
            }
        }
    }

    fn package(
        &self,
        problem: &LowerProblem,
        active: &[bool],
        z: DVector<f64>,
        residual: f64,
        iterations: usize,
        stages: Vec<StageStats>,
    ) -> LowerSolution {
        let l = problem.layout;
        let h = problem.step;
        let x = &problem.state;
        let omega = z[l.omega()];
        let vel: Vec<Vec2> = (0..l.n_points).map(|i| Vec2::new(z[l.vel(i)], z[l.vel(i) + 1])).collect();
        let next_state = State {
            theta_box: x.theta_box + h * omega,
            omega_box: omega,
            pusher_pos: (0..l.n_points).map(|i| x.pusher_pos[i] + h * vel[i]).collect(),
            pusher_vel: vel,
        };
        let forces = (0..l.n_points)
            .map(|i| ContactForce {
                normal: z[l.normal(i)] / h,
                tangent: (z[l.tangent_pos(i)] - z[l.tangent_neg(i)]) / h,
            })
            .collect();
        LowerSolution {
            next_state,
            forces,
            ground_torque: (z[l.ground_pos()] - z[l.ground_neg()]) / h,
            residual_norm: residual,
            iterations,
            z,
            active: active.to_vec(),
            kappa: problem.kappa,
            stages,
        }
    }

    /// Implicit-function-theorem Jacobians of the next state with respect to
    /// the current state and control, at the solution's relaxation.
    pub fn linearize_step(
        &mut self,
        problem: &LowerProblem,
        solution: &LowerSolution,
    ) -> Result<StepLinearization, SolveError> {
        let l = problem.layout;
        let n = l.state_dim();
        let m = l.control_dim();
        let h = problem.step;
        let blocks = problem.blocks(&solution.active);
        let eval = evaluate(problem, &blocks, &solution.z, solution.kappa, true, true);
        let jp = eval.jp.expect("parameter Jacobian requested");

        let lu = eval.jz.lu();
        let diag = lu.u().diagonal();
        let (dmax, dmin) = diag
            .iter()
            .fold((0.0f64, f64::INFINITY), |(a, b), d| (a.max(d.abs()), b.min(d.abs())));
        let condition = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
        if !condition.is_finite() || condition > 1e18 {
            return Err(SolveError::SingularJacobian { condition });
        }
        let dz = lu.solve(&(-jp)).ok_or(SolveError::SingularJacobian { condition })?;
        if dz.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::SingularJacobian { condition });
        }

        // x+ = [theta + h omega+, p_i + h v+_i, omega+, v+_i]
        let mut full = DMatrix::zeros(n, n + m);
        let map = |row: usize, zi: usize, scale: f64, full: &mut DMatrix<f64>| {
            for c in 0..n + m {
                full[(row, c)] += scale * dz[(zi, c)];
            }
        };
        full[(l.x_theta(), l.x_theta())] = 1.0;
        map(l.x_theta(), l.omega(), h, &mut full);
        map(l.x_omega(), l.omega(), 1.0, &mut full);
        for i in 0..l.n_points {
            for d in 0..2 {
                full[(l.x_pos(i) + d, l.x_pos(i) + d)] = 1.0;
                map(l.x_pos(i) + d, l.vel(i) + d, h, &mut full);
                map(l.x_vel(i) + d, l.vel(i) + d, 1.0, &mut full);
            }
        }
        Ok(StepLinearization {
            a: full.columns(0, n).into_owned(),
            b: full.columns(n, m).into_owned(),
        })
    }
}

/// Convenience wrapper with default settings.
pub fn solve_step(problem: &LowerProblem, warm_start: Option<&LowerSolution>) -> Result<LowerSolution, SolveError> {
    LowerSolver::default().solve_step(problem, warm_start)
}

pub fn linearize_step(problem: &LowerProblem, solution: &LowerSolution) -> Result<StepLinearization, SolveError> {
    LowerSolver::default().linearize_step(problem, solution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GRAVITY;
    use approx::assert_relative_eq;

    fn params() -> SystemParams {
        SystemParams::box_rotation()
    }

    fn far_point_problem(u: Vec2) -> LowerProblem {
        let state = State::at_rest(0.0, vec![Vec2::new(-0.5, 0.0)]);
        LowerProblem::new(state, Control { forces: vec![u] }, 0.05, params(), ContactModel::point(), 1e-8).unwrap()
    }

    #[test]
    fn layout_is_dense() {
        for n in 1..=2 {
            let l = VarLayout::new(n);
            let mut idx: Vec<usize> = (0..n)
                .flat_map(|i| [l.vel(i), l.vel(i) + 1, l.normal(i), l.tangent_pos(i), l.tangent_neg(i), l.slip(i)])
                .chain([l.omega(), l.ground_pos(), l.ground_neg(), l.ground_slack()])
                .collect();
            idx.sort();
            assert_eq!(idx, (0..l.dim()).collect::<Vec<_>>());
        }
        assert_eq!(VarLayout::new(1).dim(), 10);
        assert_eq!(VarLayout::new(2).dim(), 16);
    }

    #[test]
    fn schedule_is_geometric() {
        let s = SolverSettings::default().schedule(1e-8);
        assert_eq!(s.len(), 6);
        assert_relative_eq!(s[0], 1e-3);
        assert_relative_eq!(s[5], 1e-8);
        assert_eq!(SolverSettings::default().schedule(1e-2), vec![1e-2]);
    }

    #[test]
    fn free_system_at_rest_stays_put() {
        let p = far_point_problem(Vec2::zeros());
        let sol = solve_step(&p, None).unwrap();
        assert_eq!(sol.active, vec![false]);
        assert!(sol.next_state.pusher_pos[0].x == -0.5 && sol.next_state.pusher_pos[0].y == 0.0);
        assert!(sol.next_state.theta_box.abs() < 1e-14);
        assert_eq!(sol.forces[0].normal, 0.0);
        assert_eq!(sol.forces[0].tangent, 0.0);
        assert!(sol.ground_torque.abs() < 1e-12);
    }

    #[test]
    fn no_contact_rows_reduce_to_double_integrator() {
        let p = far_point_problem(Vec2::new(1.0, -2.0));
        let mut inactive = p.clone();
        inactive.active = vec![false];
        let l = inactive.layout;
        let mut z = DVector::zeros(l.dim());
        let v_free = Vec2::new(1.0, -2.0) * (0.05 / 0.1);
        z[l.vel(0)] = v_free.x;
        z[l.vel(0) + 1] = v_free.y;
        let r = assemble_residual(&z, &inactive, 0.0);
        assert!(r[l.vel(0)].abs() < 1e-15 && r[l.vel(0) + 1].abs() < 1e-15);
    }

    #[test]
    fn sticking_contact_balances_by_hand() {
        // Pusher touching the face at the center height, pressing with u = (F, 0).
        // Static balance: fn = F h (impulse), no rotation, no friction.
        let pr = params();
        let force = 2.0;
        let h = 0.05;
        let kappa = 1e-8;
        let x_contact = -pr.half_side() - pr.pusher_radius;
        let state = State::at_rest(0.0, vec![Vec2::new(x_contact, 0.0)]);
        let mut problem = LowerProblem::new(
            state,
            Control { forces: vec![Vec2::new(force, 0.0)] },
            h,
            pr.clone(),
            ContactModel::point(),
            kappa,
        )
        .unwrap();
        problem.active = vec![true];
        let l = problem.layout;
        let fn_imp = force * h;
        // gap after the step is kappa / fn, reached with a small outward velocity
        let gap = kappa / fn_imp;
        let mut z = DVector::zeros(l.dim());
        z[l.vel(0)] = -gap / h;
        // momentum: m (v+ - 0) = h F - fn  => fn = h F - m v+
        let fn_exact = h * force - pr.pusher_mass * z[l.vel(0)];
        let gap_exact = kappa / fn_exact;
        z[l.vel(0)] = -gap_exact / h;
        let fn_exact = h * force - pr.pusher_mass * z[l.vel(0)];
        z[l.normal(0)] = fn_exact;
        // sticking tangential state: vt = 0, symmetric split, beta from cone complementarity
        let c = fn_exact * pr.mu_p;
        // (beta) fp = kappa, (c - 2 fp) beta = kappa  => fp = c/3, beta = 3 kappa / c
        z[l.tangent_pos(0)] = c / 3.0;
        z[l.tangent_neg(0)] = c / 3.0;
        z[l.slip(0)] = 3.0 * kappa / c;
        let bound = h * crate::model::corner_friction_torque(0.0, pr.mass_box * GRAVITY, &pr).max_torque;
        z[l.ground_pos()] = bound / 3.0;
        z[l.ground_neg()] = bound / 3.0;
        z[l.ground_slack()] = 3.0 * kappa / bound;
        let r = assemble_residual(&z, &problem, kappa);
        // fixed point iteration above leaves an O(kappa^2) mismatch in the gap row
        assert!(inf_norm(&r) < 1e-14, "residual {r}");
        let sol = solve_step(&problem, None).unwrap();
        assert_relative_eq!(sol.z[l.normal(0)], fn_exact, epsilon = 1e-9);
        assert!(sol.next_state.theta_box.abs() < 1e-12);
    }

    #[test]
    fn residual_jacobian_matches_finite_differences() {
        let pr = params();
        let model = ContactModel::fdlc_default(&pr);
        let x0 = -pr.half_side() - pr.pusher_radius - 1e-4;
        let mut state = State::at_rest(0.1, vec![Vec2::new(x0, -0.002), Vec2::new(x0 + 0.0003, 0.0031)]);
        state.omega_box = 0.3;
        state.pusher_vel = vec![Vec2::new(0.02, -0.01), Vec2::new(0.01, 0.03)];
        let problem = LowerProblem::new(
            state,
            Control { forces: vec![Vec2::new(3.0, -1.0), Vec2::new(1.0, 0.5)] },
            0.05,
            pr,
            model,
            1e-4,
        )
        .unwrap();
        let l = problem.layout;
        let mut z = DVector::from_fn(l.dim(), |i, _| 0.1 + 0.01 * i as f64);
        z[l.omega()] = 0.2;
        for i in 0..2 {
            z[l.vel(i)] = -0.01;
        }
        let kappa = 1e-4;
        let jz = residual_jacobian(&z, &problem, kappa);
        let eps = 1e-6;
        for c in 0..l.dim() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += eps;
            zm[c] -= eps;
            let fd = (assemble_residual(&zp, &problem, kappa) - assemble_residual(&zm, &problem, kappa)) / (2.0 * eps);
            for r in 0..l.dim() {
                let err = (jz[(r, c)] - fd[r]).abs();
                assert!(
                    err <= 1e-6 * (1.0 + fd[r].abs()),
                    "entry ({r},{c}): analytic {} fd {}",
                    jz[(r, c)],
                    fd[r]
                );
            }
        }
    }

    #[test]
    fn warm_start_dimension_is_checked() {
        let p = far_point_problem(Vec2::zeros());
        let mut sol = solve_step(&p, None).unwrap();
        sol.z = DVector::zeros(3);
        assert!(matches!(
            solve_step(&p, Some(&sol)),
            Err(SolveError::Model(ModelError::DimensionMismatch { .. }))
        ));
    }

    #[test]
    fn free_linearization_is_double_integrator() {
        let p = far_point_problem(Vec2::new(0.3, 0.1));
        let sol = solve_step(&p, None).unwrap();
        let lin = linearize_step(&p, &sol).unwrap();
        let (h, m) = (0.05, 0.1);
        // x = [theta, px, py, omega, vx, vy]
        for d in 0..2 {
            let (pi, vi) = (1 + d, 4 + d);
            assert_relative_eq!(lin.a[(pi, pi)], 1.0, epsilon = 1e-12);
            assert_relative_eq!(lin.a[(pi, vi)], h, epsilon = 1e-12);
            assert_relative_eq!(lin.a[(vi, vi)], 1.0, epsilon = 1e-12);
            assert_relative_eq!(lin.b[(pi, d)], h * h / m, epsilon = 1e-12);
            assert_relative_eq!(lin.b[(vi, d)], h / m, epsilon = 1e-12);
        }
        assert!(lin.a.iter().all(|v| v.is_finite()));
    }
}
