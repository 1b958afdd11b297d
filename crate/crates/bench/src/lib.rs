//! Scenario builders shared by the benchmarks.

use fdlc_core::config::ExperimentConfig;
use fdlc_core::gradcheck::random_contact_sample;
use fdlc_core::{ContactKind, ContactModel, LowerProblem, SolverSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A pushing step with every pusher point on the face.
pub fn contact_problem(kind: ContactKind, seed: u64) -> LowerProblem {
    let cfg = ExperimentConfig::default();
    let model = ContactModel::default_for(kind, &cfg.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, u) = random_contact_sample(&mut rng, &model, &cfg.params);
    LowerProblem::new(x, u, cfg.step, cfg.params, model, SolverSettings::default().kappa_final)
        .expect("valid sample")
}

/// Default experiment shortened to `horizon` steps with a single goal.
pub fn short_experiment(horizon: usize) -> ExperimentConfig {
    ExperimentConfig {
        horizon,
        goals_deg: vec![10.0],
        ..ExperimentConfig::default()
    }
}
