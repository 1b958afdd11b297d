use fdlc_core::gradcheck::{gradcheck, random_contact_sample};
use fdlc_core::lower::LowerSolver;
use fdlc_core::model::corner_friction_torque;
use fdlc_core::{ContactKind, ContactModel, Control, LowerProblem, SolverSettings, State, SystemParams, Vec2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KAPPA: f64 = 1e-8;

fn problem(x: State, u: Control, model: &ContactModel, p: &SystemParams) -> LowerProblem {
    LowerProblem::new(x, u, 0.05, p.clone(), model.clone(), KAPPA).unwrap()
}

#[test]
fn warm_and_cold_solves_agree() {
    let p = SystemParams::box_rotation();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut solver = LowerSolver::new(SolverSettings::default());
    for kind in [ContactKind::Point, ContactKind::Fdlc] {
        let model = ContactModel::default_for(kind, &p);
        for _ in 0..10 {
            let (x, u) = random_contact_sample(&mut rng, &model, &p);
            let base = solver.solve_step(&problem(x.clone(), u.clone(), &model, &p), None).unwrap();
            let mut nudged = u.clone();
            for f in &mut nudged.forces {
                *f *= 1.05;
            }
            let pr = problem(x, nudged, &model, &p);
            let cold = solver.solve_step(&pr, None).unwrap();
            let warm = solver.solve_step(&pr, Some(&base)).unwrap();
            assert_eq!(cold.active, warm.active);
            let diff = (&cold.z - &warm.z).amax();
            assert!(diff <= 1e-8, "{kind}: warm and cold differ by {diff:e}");
            assert!(cold.residual_norm <= 1e-8 && warm.residual_norm <= 1e-8);
        }
    }
}

#[test]
fn step_jacobians_match_finite_differences() {
    let p = SystemParams::box_rotation();
    for kind in [ContactKind::Point, ContactKind::Fdlc] {
        let r = gradcheck(kind, &p, 0.05, &SolverSettings::default(), 20, 7).unwrap();
        assert_eq!(r.samples.len(), 20);
        assert!(r.max_rel_err() <= 1e-4, "{kind}: {:e}", r.max_rel_err());
    }
}

#[test]
fn ground_friction_stops_a_free_spin() {
    let mut p = SystemParams::box_rotation();
    p.mu_s = 0.01;
    let h = 0.05;
    let model = ContactModel::point();
    let tau = corner_friction_torque(1.0, p.box_weight(), &p).max_torque;
    let decel = h * tau / p.box_inertia;
    let mut x = State::at_rest(0.0, vec![Vec2::new(-0.5, 0.0)]);
    x.omega_box = 4.5 * decel;
    let mut solver = LowerSolver::new(SolverSettings::default());
    let mut expected = x.omega_box;
    for _ in 0..8 {
        let sol = solver
            .solve_step(&LowerProblem::new(x.clone(), Control::zeros(1), h, p.clone(), model.clone(), KAPPA).unwrap(), None)
            .unwrap();
        expected = (expected - decel).max(0.0);
        // relaxed Coulomb law: the torque falls short of its bound by about kappa / |omega|
        assert!((sol.next_state.omega_box - expected).abs() <= 1e-3 * decel, "{} vs {expected}", sol.next_state.omega_box);
        assert!(sol.next_state.omega_box >= -1e-6);
        x = sol.next_state;
    }
    assert!(x.omega_box.abs() < 1e-6);
}
