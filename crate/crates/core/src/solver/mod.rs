//! Convex solvers used by training.
//!
//! - [`solve_dual_qp`]: the per-class dual quadratic program over `(α, β, θ)`.
//! - [`recover_rho`]: exact one-dimensional offset recovery.
//! - [`solve_smooth_constrained`]: smooth convex objective, one smooth convex
//!   inequality constraint, box bounds and an optional ℓ1 term.
//! - [`smo`]: sequential minimal optimization for box- and
//!   equality-constrained QPs, shared by the dual QP and the one-class SVM.

use std::fmt;

use serde::{Deserialize, Serialize};

mod dual_qp;
mod rho;
pub mod smo;
mod smooth;

pub use dual_qp::{solve_dual_qp, DualSolution, QpOptions, QpProblem};
pub use rho::{recover_rho, rho_constraint, rho_objective};
pub use smooth::{
    solve_smooth_constrained, SmoothConstraint, SmoothConstrainedProblem, SmoothOptions,
    SmoothOutcome,
};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub objective: f64,
    /// Largest constraint violation.
    pub primal_residual: f64,
    /// Stationarity residual.
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: SolverStatus,
}

impl SolverReport {
    pub fn max_residual(&self) -> f64 {
        self.primal_residual.max(self.dual_residual)
    }

    pub fn is_converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }
}

impl fmt::Display for SolverReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "status={:?} objective={:.6e} primal={:.2e} dual={:.2e} iterations={}",
            self.status, self.objective, self.primal_residual, self.dual_residual, self.iterations
        )
    }
}
