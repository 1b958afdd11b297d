//! Finite-difference audit of the step linearization.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::lower::{LowerProblem, LowerSolver, SolveError, SolverSettings};
use crate::model::{face_normal, face_tangent, ContactKind, ContactModel, Control, State, SystemParams, Vec2};

/// Relative errors of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckSample {
    pub rel_err_a: f64,
    pub rel_err_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub kind: ContactKind,
    pub samples: Vec<GradcheckSample>,
    pub max_rel_err_a: f64,
    pub max_rel_err_b: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.max_rel_err_a.max(self.max_rel_err_b)
    }
}

/// A random state with every pusher point pressed against the face, and a
/// control that keeps pushing.
pub fn random_contact_sample<R: Rng>(
    rng: &mut R,
    model: &ContactModel,
    params: &SystemParams,
) -> (State, Control) {
    let theta = rng.random_range(-0.3..0.3);
    let nrm = face_normal(theta);
    let tan = face_tangent(theta);
    let n = model.n_points();
    let depth = params.half_side() + params.pusher_radius;
    let center = rng.random_range(-0.6..0.6) * params.half_side();
    let offsets: Vec<f64> = match model.kind {
        ContactKind::Point => vec![0.0],
        ContactKind::Fdlc => {
            let half = 0.5 * model.rest_length * rng.random_range(0.9..1.1);
            vec![-half, half]
        }
    };
    let pos: Vec<Vec2> = offsets
        .iter()
        .map(|o| (depth + rng.random_range(0.0..2e-4)) * nrm + (center + o) * tan)
        .collect();
    let vel: Vec<Vec2> = (0..n)
        .map(|_| Vec2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
        .collect();
    let omega = rng.random_range(-0.2..0.2);
    let forces = (0..n)
        .map(|_| -rng.random_range(2.0..8.0) * nrm + rng.random_range(-1.0..1.0) * tan)
        .collect();
    let state = State {
        theta_box: theta,
        omega_box: omega,
        pusher_pos: pos,
        pusher_vel: vel,
    };
    (state, Control { forces })
}

fn rel_err(exact: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    let scale = fd.norm();
    let diff = (exact - fd).norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Compare the implicit-function Jacobians against central differences of
/// the full step solve at `settings.kappa_final`, over `samples` random
/// contact states.
pub fn gradcheck(
    kind: ContactKind,
    params: &SystemParams,
    step: f64,
    settings: &SolverSettings,
    samples: usize,
    seed: u64,
) -> Result<GradcheckReport, SolveError> {
    let model = ContactModel::default_for(kind, params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut solver = LowerSolver::new(settings.clone());
    let kappa = settings.kappa_final;
    let n_points = model.n_points();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (x, u) = random_contact_sample(&mut rng, &model, params);
        let problem = LowerProblem::new(x.clone(), u.clone(), step, params.clone(), model.clone(), kappa)?;
        let sol = solver.solve_step(&problem, None)?;
        let lin = solver.linearize_step(&problem, &sol)?;

        let xv = x.to_vec();
        let uv = u.to_vec();
        let nx = xv.len();
        let nu = uv.len();
        let mut fd = DMatrix::zeros(nx, nx + nu);
        for c in 0..nx + nu {
            // forces are three orders larger than states
            let eps = if c < nx { 1e-7 } else { 2e-5 * uv[c - nx].abs().max(1.0) };
            let mut next = |sign: f64| -> Result<Vec<f64>, SolveError> {
                let (mut xp, mut up) = (xv.clone(), uv.clone());
                if c < nx {
                    xp[c] += sign * eps;
                } else {
                    up[c - nx] += sign * eps;
                }
                let p = LowerProblem::new(
                    State::from_slice(&xp, n_points)?,
                    Control::from_slice(&up, n_points)?,
                    step,
                    params.clone(),
                    model.clone(),
                    kappa,
                )?;
                Ok(solver.solve_step(&p, Some(&sol))?.next_state.to_vec())
            };
            let plus = next(1.0)?;
            let minus = next(-1.0)?;
            for r in 0..nx {
                fd[(r, c)] = (plus[r] - minus[r]) / (2.0 * eps);
            }
        }
        let a_fd = fd.columns(0, nx).into_owned();
        let b_fd = fd.columns(nx, nu).into_owned();
        out.push(GradcheckSample {
            rel_err_a: rel_err(&lin.a, &a_fd),
            rel_err_b: rel_err(&lin.b, &b_fd),
        });
    }
    Ok(GradcheckReport {
        kind,
        max_rel_err_a: out.iter().fold(0.0, |m, s| m.max(s.rel_err_a)),
        max_rel_err_b: out.iter().fold(0.0, |m, s| m.max(s.rel_err_b)),
        samples: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_touch_the_face() {
        let p = SystemParams::box_rotation();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [ContactKind::Point, ContactKind::Fdlc] {
            let model = ContactModel::default_for(kind, &p);
            for _ in 0..10 {
                let (x, _) = random_contact_sample(&mut rng, &model, &p);
                for q in &x.pusher_pos {
                    let g = crate::model::gap(q, x.theta_box, &p);
                    assert!((0.0..=2e-4).contains(&g), "gap {g}");
                }
            }
        }
    }
}
