//! Shared fixtures for the criterion benchmarks.

use monoflow_core::{BilinearProblem, Method, SolverConfig, Vector};

pub fn bilinear(n: usize) -> BilinearProblem {
    BilinearProblem::new(n).expect("bilinear problem is well posed")
}

/// Solver config at the default step size, starting from the origin.
pub fn solver_config(problem: &BilinearProblem, method: Method, iterations: u64) -> SolverConfig {
    let l = monoflow_core::Operator::lipschitz(&problem.operator);
    let mut cfg = SolverConfig::new(
        method,
        method.default_gamma(l),
        iterations,
        Vector::zeros(2 * problem.n()),
    );
    cfg.record_stride = iterations;
    cfg
}
