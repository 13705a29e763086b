//! One-class SVM baseline, trained per class with no regard to the other
//! classes or to the test distribution.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{GpsError, Result};
use crate::gps::DecisionFunction;
use crate::kernel::{gram, KernelSpec, WeightVector};
use crate::solver::smo::SmoProblem;
use crate::solver::{SolverReport, SolverStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcsvmConfig {
    pub nu: f64,
    pub kernel: KernelSpec,
}

impl OcsvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(GpsError::input(format!("nu must lie in (0, 1], got {}", self.nu)));
        }
        self.kernel.validate()
    }
}

/// Dual solution and packaged decision function.
#[derive(Debug, Clone)]
pub struct OcsvmFit {
    pub function: DecisionFunction,
    pub alpha: Vec<f64>,
    pub report: SolverReport,
}

/// Solve `min ½αᵀKα` over `0 ≤ α ≤ 1/(mν)`, `Σα = 1`.
pub fn fit_ocsvm(points: ArrayView2<f64>, config: &OcsvmConfig) -> Result<OcsvmFit> {
    config.validate()?;
    let m = points.nrows();
    if m < 2 {
        return Err(GpsError::input(format!("one-class SVM needs at least 2 points, got {m}")));
    }
    let d = WeightVector::ones(points.ncols());
    let q = gram(&config.kernel, &d, points, points)?;
    let cap = 1.0 / (m as f64 * config.nu);
    let upper = vec![cap; m];
    let y = vec![1.0; m];
    let p = vec![0.0; m];
    let mut a0 = vec![0.0; m];
    let mut left = 1.0;
    for a in a0.iter_mut() {
        let v = cap.min(left);
        *a = v;
        left -= v;
        if left <= 0.0 {
            break;
        }
    }
    let problem = SmoProblem {
        q: &q,
        p: &p,
        y: &y,
        upper: &upper,
    };
    let out = problem.solve(a0, DEFAULT_TOL * 1e-2, DEFAULT_MAX_ITER * m.max(10));
    let sum: f64 = out.a.iter().sum();
    let primal_residual = (sum - 1.0).abs();
    let status = if primal_residual > DEFAULT_TOL {
        SolverStatus::Infeasible
    } else if out.converged {
        SolverStatus::Converged
    } else {
        SolverStatus::MaxIter
    };
    let report = SolverReport {
        objective: out.objective(&p),
        primal_residual,
        dual_residual: out.gap,
        iterations: out.iterations,
        status,
    };
    if status == SolverStatus::Infeasible {
        return Err(GpsError::Solver {
            msg: "one-class SVM dual infeasible".into(),
            report,
        });
    }
    let function = DecisionFunction::from_representers(config.kernel, d, points, &out.a, out.b)?;
    Ok(OcsvmFit {
        function,
        alpha: out.a,
        report,
    })
}

pub fn train_ocsvm(points: ArrayView2<f64>, config: &OcsvmConfig) -> Result<DecisionFunction> {
    Ok(fit_ocsvm(points, config)?.function)
}
