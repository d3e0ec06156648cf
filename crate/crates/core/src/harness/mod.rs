//! User-facing surface: run configuration, experiment orchestration,
//! evaluation metrics, gradient-check suite, and CSV artifact I/O.

pub mod config;
pub mod csvio;
pub mod eval;
pub mod experiment;
pub mod gradcheck;

pub use config::{load_config, EvalConfig, Mode, NetworkConfig, RunConfig};
pub use eval::{evaluate, rollout_trajectories, ClassReport, EvalReport, TrajectoryRow};
pub use experiment::{compare_checkpoints, run_experiment, CompareRow};
pub use gradcheck::{run_gradcheck_suite, GradcheckOutcome};
