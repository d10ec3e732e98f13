//! Zeros of monotone Lipschitz operators under noisy evaluations.
//!
//! * [`operators`]: affine monotone operators, resolvents, Yosida
//!   approximations and the built-in test problems.
//! * [`oracle`]: unbiased noisy evaluations with keyed reproducible seeds.
//! * [`sde`]: Euler–Maruyama simulation of the corrected SDE and its
//!   continuous-time bounds.
//! * [`solvers`]: stochastic OGDA / extragradient / forward iterations and
//!   their ergodic bounds.
//! * [`metrics`]: traces, ergodic averages and ensemble summaries.
//! * [`experiment`]: config-driven Monte-Carlo runs, bound verification and
//!   SVG plots.

pub mod error;
pub mod experiment;
pub mod metrics;
pub mod operators;
pub mod oracle;
pub mod plot;
pub mod sde;
pub mod solvers;

pub use error::{Error, Result};
pub use experiment::{
    run_experiment, verify, ExperimentConfig, ExperimentMethod, Plan, ProblemSpec,
};
pub use metrics::{aggregate, EnsembleSummary, Metric, RunRecord};
pub use operators::{BilinearProblem, Matrix, Operator, OperatorSpec, Vector, ZeroCertificate};
pub use oracle::{NoiseKind, NoiseModel, SeedSpec, Stream};
pub use sde::{DiffusionSpec, Envelope, ParamSchedule, Schedule, SdeOptions, SdeTrajectory};
pub use solvers::{BoundKind, BoundParams, IterateTrace, Method, SolverConfig};
