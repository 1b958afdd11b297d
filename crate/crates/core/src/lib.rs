//! Bi-level trajectory optimization for pushing a pinned box, with point and
//! force-distributed line contact.

pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod ilqr;
pub mod lower;
pub mod metrics;
pub mod model;
pub mod plot;

pub use ilqr::{
    backward_pass, forward_pass, optimize, stage_cost, terminal_cost, CostTerms, CostWeights, Dynamics, Gains, IlqrError,
    IlqrSettings, Trajectory,
};
pub use lower::{
    assemble_residual, linearize_step, solve_step, ContactForce, LowerProblem, LowerSolution, LowerSolver,
    SolveError, SolverSettings, StepLinearization, VarLayout,
};
pub use model::{
    ContactFrame, ContactId, ContactKind, ContactModel, Control, ModelError, State, SystemParams, Vec2,
};
pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{ExperimentError, RunBundle, RunOutcome, TrajectoryFile};
pub use metrics::{ComparisonRow, MetricsError, MetricsReport, Thresholds};
