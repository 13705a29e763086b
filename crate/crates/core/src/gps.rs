//! Per-class GPS training: assemble the dual QP from the class sample and the
//! unlabeled test subset, solve it, recover the offset, and package the
//! decision function.

use std::sync::OnceLock;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ClassFailure, GpsError, Result};
use crate::kernel::{gram_blocks, KernelSpec, WeightVector};
use crate::par::{self, Jobs};
use crate::solver::{
    recover_rho, solve_dual_qp, DualSolution, QpOptions, QpProblem, SolverReport, SolverStatus,
};

/// Coefficients at or below this magnitude are dropped from stored models.
pub const PRUNE_THRESHOLD: f64 = 1e-8;

/// `f(x) = Σ_i c_i K_d(x, s_i) − ρ` over stored support rows `s_i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionFunction {
    pub kernel: KernelSpec,
    pub weights: WeightVector,
    pub supports: Array2<f64>,
    pub coef: Vec<f64>,
    pub rho: f64,
    #[serde(skip)]
    scaled: OnceLock<Array2<f64>>,
}

impl DecisionFunction {
    pub fn new(
        kernel: KernelSpec,
        weights: WeightVector,
        supports: Array2<f64>,
        coef: Vec<f64>,
        rho: f64,
    ) -> Result<Self> {
        kernel.validate()?;
        if supports.nrows() != coef.len() {
            return Err(GpsError::input("one coefficient per support row is required"));
        }
        if supports.ncols() != weights.len() {
            return Err(GpsError::Dimension {
                expected: weights.len(),
                got: supports.ncols(),
            });
        }
        Ok(DecisionFunction {
            kernel,
            weights,
            supports,
            coef,
            rho,
            scaled: OnceLock::new(),
        })
    }

    /// Keep rows whose coefficient exceeds [`PRUNE_THRESHOLD`] in magnitude.
    pub(crate) fn from_representers(
        kernel: KernelSpec,
        weights: WeightVector,
        points: ArrayView2<f64>,
        coef: &[f64],
        rho: f64,
    ) -> Result<Self> {
        let keep: Vec<usize> = (0..coef.len())
            .filter(|&i| coef[i].abs() > PRUNE_THRESHOLD)
            .collect();
        let supports = points.select(Axis(0), &keep);
        let coef = keep.iter().map(|&i| coef[i]).collect();
        DecisionFunction::new(kernel, weights, supports, coef, rho)
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn n_supports(&self) -> usize {
        self.coef.len()
    }

    fn scaled_supports(&self) -> &Array2<f64> {
        self.scaled.get_or_init(|| {
            self.weights
                .scale_rows(self.supports.view())
                .expect("supports match weight dimension")
        })
    }

    /// Score of a single point.
    pub fn score(&self, x: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(GpsError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut u = vec![0.0; x.len()];
        self.weights.scale_into(x.iter(), &mut u);
        Ok(self.score_scaled(&u))
    }

    fn score_scaled(&self, u: &[f64]) -> f64 {
        let s = self.scaled_supports();
        let mut acc = 0.0;
        for (row, c) in s.outer_iter().zip(&self.coef) {
            let v = row.as_slice().expect("standard layout");
            acc += c * self.kernel.eval_scaled(u, v);
        }
        acc - self.rho
    }

    /// Scores of every row.
    pub fn scores(&self, points: ArrayView2<f64>) -> Result<Vec<f64>> {
        if points.ncols() != self.dim() {
            return Err(GpsError::Dimension {
                expected: self.dim(),
                got: points.ncols(),
            });
        }
        let scaled = self.weights.scale_rows(points)?;
        self.scaled_supports();
        Ok(par::map_range(Jobs::all(), scaled.nrows(), |i| {
            self.score_scaled(scaled.row(i).as_slice().expect("standard layout"))
        }))
    }
}

/// Constants of the generalization bound that yields the optional
/// constraint tightening `γ − ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Radius of the hypothesis class.
    pub s: f64,
    /// ℓ1 budget on the feature weights.
    pub s_prime: f64,
    /// Lipschitz constant of the loss (1 for hinge and Huberized hinge).
    pub c: f64,
    /// Kernel sup-norm (1 for the gaussian kernel).
    pub kappa: f64,
    /// Confidence level.
    pub zeta: f64,
}

impl Default for TheoryParams {
    fn default() -> Self {
        TheoryParams {
            s: 1.0,
            s_prime: 1.0,
            c: 1.0,
            kappa: 1.0,
            zeta: 0.05,
        }
    }
}

/// `ε = (√2·s + 2)·c·κ·(2 + 3·√(2·ln(2/ζ))) / √n1`.
pub fn gamma_adjustment(params: &TheoryParams, n1: usize) -> Result<f64> {
    let TheoryParams { s, c, kappa, zeta, .. } = *params;
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(GpsError::input(format!("zeta must lie in (0, 1), got {zeta}")));
    }
    if n1 == 0 {
        return Err(GpsError::input("gamma adjustment needs n1 >= 1"));
    }
    if s < 0.0 || c < 0.0 || kappa < 0.0 {
        return Err(GpsError::input("theory constants must be nonnegative"));
    }
    let r = (std::f64::consts::SQRT_2 * s + 2.0) * c * kappa * (2.0 + 3.0 * (2.0 * (2.0 / zeta).ln()).sqrt());
    Ok(r / (n1 as f64).sqrt())
}

/// Effective constraint level: `γ − ε` clipped below at `0.1·γ`.
pub fn adjusted_gamma(gamma: f64, params: Option<&TheoryParams>, n1: usize) -> Result<f64> {
    match params {
        None => Ok(gamma),
        Some(p) => Ok((gamma - gamma_adjustment(p, n1)?).max(0.1 * gamma)),
    }
}

#[derive(Debug, Clone)]
pub struct ClassTrainingInput<'a> {
    /// Class-k rows.
    pub train: ArrayView2<'a, f64>,
    /// Unlabeled test-subset rows.
    pub test: ArrayView2<'a, f64>,
    pub gamma: f64,
    /// Test-side slack weight, `(λm)⁻¹`.
    pub c: f64,
    pub kernel: KernelSpec,
    pub d: WeightVector,
    /// Opt-in constraint tightening.
    pub theory: Option<TheoryParams>,
}

impl ClassTrainingInput<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.train.nrows() < 2 {
            return Err(GpsError::input(format!(
                "class sample needs at least 2 rows, got {}",
                self.train.nrows()
            )));
        }
        if self.test.nrows() < 2 {
            return Err(GpsError::input(format!(
                "test subset needs at least 2 rows, got {}",
                self.test.nrows()
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(GpsError::input(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(GpsError::input(format!("C must be positive, got {}", self.c)));
        }
        self.kernel.validate()?;
        let p = self.d.len();
        for got in [self.train.ncols(), self.test.ncols()] {
            if got != p {
                return Err(GpsError::Dimension { expected: p, got });
            }
        }
        Ok(())
    }

    pub fn effective_gamma(&self) -> Result<f64> {
        adjusted_gamma(self.gamma, self.theory.as_ref(), self.train.nrows())
    }
}

/// Everything produced by one GPS fit.
#[derive(Debug, Clone)]
pub struct GpsFit {
    pub function: DecisionFunction,
    pub dual: DualSolution,
    pub report: SolverReport,
    /// `ŵᵀΦ(x_i)` on the class sample.
    pub train_margins: Vec<f64>,
    /// `ŵᵀΦ(x_j)` on the test subset.
    pub test_margins: Vec<f64>,
    pub gamma_used: f64,
}

pub fn fit_gps(input: &ClassTrainingInput<'_>, opts: &QpOptions) -> Result<GpsFit> {
    input.validate()?;
    let gamma = input.effective_gamma()?;
    let n = input.train.nrows();
    let blocks = gram_blocks(&input.kernel, &input.d, input.train, input.test)?;
    let problem = QpProblem::from_blocks(&blocks, input.c, gamma);
    let (dual, report) = solve_dual_qp(&problem, opts)?;
    match report.status {
        SolverStatus::Infeasible => {
            return Err(GpsError::Solver {
                msg: "dual QP infeasible".into(),
                report,
            })
        }
        SolverStatus::MaxIter => log::warn!("dual QP stopped before tolerance: {report}"),
        SolverStatus::Converged => {}
    }
    let prune = |v: f64| if v.abs() > PRUNE_THRESHOLD { v } else { 0.0 };
    let alpha: Vec<f64> = dual.alpha.iter().map(|&v| prune(v)).collect();
    let beta: Vec<f64> = dual.beta.iter().map(|&v| prune(v)).collect();
    let a = ndarray::ArrayView1::from(&alpha);
    let b = ndarray::ArrayView1::from(&beta);
    let train_margins = (blocks.g1.dot(&a) - blocks.g3.dot(&b)).to_vec();
    let test_margins = (blocks.g3.t().dot(&a) - blocks.g2.dot(&b)).to_vec();
    let rho = recover_rho(&train_margins, &test_margins, input.c, gamma, n);

    let points = ndarray::concatenate(Axis(0), &[input.train, input.test])
        .map_err(|e| GpsError::Internal(e.to_string()))?;
    let coef: Vec<f64> = alpha.iter().copied().chain(beta.iter().map(|v| -v)).collect();
    let function =
        DecisionFunction::from_representers(input.kernel, input.d.clone(), points.view(), &coef, rho)?;
    Ok(GpsFit {
        function,
        dual,
        report,
        train_margins,
        test_margins,
        gamma_used: gamma,
    })
}

pub fn train_gps(input: &ClassTrainingInput<'_>) -> Result<DecisionFunction> {
    let opts = QpOptions {
        check_psd: false,
        ..QpOptions::default()
    };
    Ok(fit_gps(input, &opts)?.function)
}

/// Train every class; output order follows input order.
pub fn train_all_classes(inputs: &[ClassTrainingInput<'_>], jobs: Jobs) -> Result<Vec<DecisionFunction>> {
    run_per_class(inputs, jobs, train_gps)
}

pub(crate) fn run_per_class<I, F>(inputs: &[I], jobs: Jobs, f: F) -> Result<Vec<DecisionFunction>>
where
    I: Sync,
    F: Fn(&I) -> Result<DecisionFunction> + Sync + Send,
{
    if inputs.is_empty() {
        return Err(GpsError::input("at least one class is required"));
    }
    let results = par::map_slice(jobs, inputs, f);
    let mut out = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (class, r) in results.into_iter().enumerate() {
        match r {
            Ok(f) => out.push(f),
            Err(e) => failures.push(ClassFailure {
                class,
                reason: e.to_string(),
            }),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(GpsError::Training { failures })
    }
}
