//! GPS with kernel feature selection.
//!
//! Alternates between the offset/coefficient problem for a fixed weight
//! vector `d` and a convex surrogate in `d` obtained by linearizing the
//! weighted kernel around the current `d`, followed by a backtracking line
//! search on the true objective
//!
//! ```text
//! Ψ(α, ρ, d) = ½ αᵀK_dα − ρ + C1 Σ_{j∈te} ℓ(ρ − (K_dα)_j) + C2 ‖d‖₁
//! s.t. (1/n_k) Σ_{i∈k} ℓ((K_dα)_i − ρ) ≤ γ,  0 ≤ d ≤ 1.
//! ```
//!
//! Representer points are all `n_k + m` class and test rows, class rows first.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GpsError, Result};
use crate::gps::{ClassTrainingInput, DecisionFunction};
use crate::kernel::{gram_scaled, KernelSpec, WeightVector};
use crate::losses::LossSpec;
use crate::par;
use crate::solver::{
    solve_dual_qp, solve_smooth_constrained, QpOptions, QpProblem, SmoothConstrainedProblem,
    SmoothConstraint, SmoothOptions, SmoothOutcome, SolverReport, SolverStatus,
};

/// Slack on the true constraint accepted for any iterate.
pub const FEASIBILITY_TOL: f64 = 1e-6;
/// Allowed increase of Ψ between accepted iterates.
pub const DESCENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct KfsOptions {
    pub c1: f64,
    pub c2: f64,
    pub loss: LossSpec,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Outer stopping tolerance on `max(|Δα|∞, |Δρ|, |Δd|∞)`; the inner
    /// d-loop uses it on `|Δd|∞`.
    pub tol: f64,
    pub min_step: f64,
    /// Coefficient step.
    pub qp: QpOptions,
    /// Weight step.
    pub smooth: SmoothOptions,
}

impl KfsOptions {
    pub fn new(c1: f64, c2: f64) -> Self {
        KfsOptions {
            c1,
            c2,
            loss: LossSpec::default(),
            max_outer: 50,
            max_inner: 20,
            tol: 1e-4,
            min_step: 1e-6,
            qp: QpOptions {
                check_psd: false,
                ..QpOptions::default()
            },
            smooth: SmoothOptions {
                tol: 1e-5,
                max_iter: 100,
                max_outer: 8,
                ..SmoothOptions::default()
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.c1 >= 0.0 && self.c1.is_finite()) {
            return Err(GpsError::input(format!("C1 must be nonnegative, got {}", self.c1)));
        }
        if !(self.c2 >= 0.0 && self.c2.is_finite()) {
            return Err(GpsError::input(format!("C2 must be nonnegative, got {}", self.c2)));
        }
        if !self.loss.is_differentiable() {
            return Err(GpsError::Unsupported(
                "feature selection requires the huberized loss".into(),
            ));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfsState {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub d: WeightVector,
    pub objective: f64,
}

/// First-order expansion of `K_d` around `d′`:
/// `K_d[i,j] ≈ A[i,j] + ∇K_{d′}[i,j]ᵀd`, and `B[:,i] = Σ_j α_j ∇K_{d′}[i,j]`.
#[derive(Debug, Clone)]
pub struct LinearizationMatrices {
    /// N × N
    pub a: Array2<f64>,
    /// p × N
    pub b: Array2<f64>,
}

/// The class/test layout of a stacked representer set.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub n_train: usize,
    pub gamma: f64,
}

fn sigma_of(kernel: &KernelSpec) -> Result<f64> {
    match *kernel {
        KernelSpec::Gaussian { sigma } => Ok(sigma),
        KernelSpec::Linear => Err(GpsError::Unsupported(
            "feature selection requires the gaussian kernel".into(),
        )),
    }
}

fn kernel_matrix(kernel: &KernelSpec, d: &WeightVector, points: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(gram_scaled(kernel, &d.scale_rows(points.view())?))
}

fn matvec(k: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    k.dot(&ndarray::ArrayView1::from(x)).to_vec()
}

/// Class-side constraint value `(1/n_k) Σ_{i<n_k} ℓ(u_i − ρ)` for margins `u = K_dα`.
pub fn constraint_value(loss: &LossSpec, u: &[f64], rho: f64, n_train: usize) -> f64 {
    u[..n_train].iter().map(|&ui| loss.value(ui - rho)).sum::<f64>() / n_train as f64
}

/// `Ψ` without the `C2‖d‖₁` term, for margins `u = K_dα`.
fn smooth_objective(loss: &LossSpec, c1: f64, alpha: &[f64], u: &[f64], rho: f64, n_train: usize) -> f64 {
    let quad: f64 = alpha.iter().zip(u).map(|(a, v)| a * v).sum();
    let test: f64 = u[n_train..].iter().map(|&uj| loss.value(rho - uj)).sum();
    0.5 * quad - rho + c1 * test
}

/// Result of the `(α, ρ)` step.
#[derive(Debug, Clone)]
pub struct AlphaRho {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub constraint: f64,
    pub report: SolverReport,
}

fn loss_delta(loss: &LossSpec) -> f64 {
    match *loss {
        LossSpec::Hinge => 0.0,
        LossSpec::Huberized { delta } => delta,
    }
}

/// Minimize `½αᵀKα − ρ + C1 Σ_te ℓ(ρ − (Kα)_j)` subject to the class-side
/// constraint, for a fixed kernel matrix `k`.
///
/// Solved through the dual, which for fixed constraint multiplier is a box QP
/// with one equality; `ρ` is then the largest offset meeting the constraint.
pub fn solve_alpha_rho(k: &Array2<f64>, layout: Layout, c1: f64, loss: &LossSpec, opts: &QpOptions) -> Result<AlphaRho> {
    let n_all = k.nrows();
    let n = layout.n_train;
    if n == 0 || n >= n_all || k.ncols() != n_all {
        return Err(GpsError::input("inconsistent representer layout"));
    }
    let dim = if c1 > 0.0 { n_all } else { n };
    let mut h = k.slice(ndarray::s![..dim, ..dim]).to_owned();
    for i in 0..dim {
        for j in 0..dim {
            if (i < n) != (j < n) {
                h[[i, j]] = -h[[i, j]];
            }
        }
    }
    let problem = QpProblem {
        h,
        n_train: n,
        c: if c1 > 0.0 { c1 } else { 1.0 },
        gamma: layout.gamma,
        delta: loss_delta(loss),
    };
    let (sol, report) = solve_dual_qp(&problem, opts)?;
    let mut alpha = vec![0.0; n_all];
    alpha[..n].copy_from_slice(&sol.alpha);
    for (a, b) in alpha[n..dim].iter_mut().zip(&sol.beta) {
        *a = -b;
    }
    let u = matvec(k, &alpha);
    let rho = boundary_rho(loss, &u, layout)?;
    let constraint = constraint_value(loss, &u, rho, n);
    Ok(AlphaRho {
        alpha,
        rho,
        constraint,
        report,
    })
}

/// Largest `ρ` with `(1/n_k) Σ ℓ(u_i − ρ) ≤ γ`; the constraint is
/// nondecreasing in `ρ` and the objective decreasing.
fn boundary_rho(loss: &LossSpec, u: &[f64], layout: Layout) -> Result<f64> {
    let n = layout.n_train;
    let feasible = |r: f64| constraint_value(loss, u, r, n) <= layout.gamma;
    let top = u[..n].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = u[..n].iter().copied().fold(f64::INFINITY, f64::min) - 2.0;
    let mut hi = top + 2.0;
    if !feasible(lo) || feasible(hi) {
        return Err(GpsError::Solver {
            msg: "no feasible offset for the class constraint".into(),
            report: SolverReport {
                objective: f64::NAN,
                primal_residual: constraint_value(loss, u, lo, n) - layout.gamma,
                dual_residual: f64::NAN,
                iterations: 0,
                status: SolverStatus::Infeasible,
            },
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Expand `K_d` around `d′ = d` for coefficient vector `alpha`.
pub fn linearize(
    kernel: &KernelSpec,
    d: &WeightVector,
    alpha: &[f64],
    points: ArrayView2<f64>,
) -> Result<LinearizationMatrices> {
    let sigma = sigma_of(kernel)?;
    let n_all = points.nrows();
    let p = points.ncols();
    if alpha.len() != n_all {
        return Err(GpsError::Dimension {
            expected: n_all,
            got: alpha.len(),
        });
    }
    let scaled = d.scale_rows(points)?;
    let raw = points.as_standard_layout();
    let raw = raw.as_slice().expect("standard layout");
    let sc = scaled.as_slice().expect("standard layout");
    let dv = d.as_slice();
    let s2 = sigma * sigma;
    // Row i of `a`, followed by column i of `b`.
    let width = n_all + p;
    let mut buf = vec![0.0; n_all * width];
    par::fill_rows(&mut buf, width, |i, row| {
        let (arow, bcol) = row.split_at_mut(n_all);
        let xi = &raw[i * p..(i + 1) * p];
        let si = &sc[i * p..(i + 1) * p];
        for j in 0..n_all {
            let xj = &raw[j * p..(j + 1) * p];
            let sj = &sc[j * p..(j + 1) * p];
            let dist: f64 = si.iter().zip(sj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s2;
            let kij = kernel.eval_scaled(si, sj);
            arow[j] = kij * (1.0 + 2.0 * dist);
            let w = alpha[j] * kij;
            if w != 0.0 {
                for t in 0..p {
                    let diff = xi[t] - xj[t];
                    bcol[t] += w * diff * diff;
                }
            }
        }
        for t in 0..p {
            bcol[t] *= -2.0 * dv[t] / s2;
        }
    });
    let all = Array2::from_shape_vec((n_all, width), buf).expect("shape");
    let a = all.slice(ndarray::s![.., ..n_all]).to_owned();
    let b = all.slice(ndarray::s![.., n_all..]).t().to_owned();
    Ok(LinearizationMatrices { a, b })
}

/// Result of the surrogate d-step.
#[derive(Debug, Clone)]
pub struct DStep {
    pub d: WeightVector,
    pub outcome: Option<SmoothOutcome>,
    /// The surrogate solve broke down; `d` is the previous weight vector.
    pub stalled: bool,
}

/// Minimize `½dᵀ(Bα) + C1 Σ_te ℓ(ρ − (Aα)_j − B[:,j]ᵀd) + C2‖d‖₁` over the box
/// subject to the linearized class constraint.
#[allow(clippy::too_many_arguments)]
pub fn solve_d_step(
    lin: &LinearizationMatrices,
    alpha: &[f64],
    rho: f64,
    c1: f64,
    c2: f64,
    layout: Layout,
    loss: &LossSpec,
    d_prev: &WeightVector,
    opts: &SmoothOptions,
) -> Result<DStep> {
    let n_all = lin.a.nrows();
    let p = lin.b.nrows();
    let n = layout.n_train;
    if alpha.len() != n_all || lin.b.ncols() != n_all || d_prev.len() != p {
        return Err(GpsError::input("inconsistent linearization shapes"));
    }
    let a_alpha = matvec(&lin.a, alpha);
    let b_alpha = matvec(&lin.b, alpha);
    let bt = lin.b.t().as_standard_layout().into_owned();
    let objective = |d: &[f64], g: &mut [f64]| -> f64 {
        let z = matvec(&bt, d);
        let mut val = 0.5 * b_alpha.iter().zip(d).map(|(r, x)| r * x).sum::<f64>();
        for t in 0..p {
            g[t] = 0.5 * b_alpha[t];
        }
        for j in n..n_all {
            let arg = rho - a_alpha[j] - z[j];
            val += c1 * loss.value(arg);
            let w = c1 * loss.grad(arg);
            if w != 0.0 {
                for (gt, bjt) in g.iter_mut().zip(bt.row(j)) {
                    *gt -= w * bjt;
                }
            }
        }
        val
    };
    let constraint = |d: &[f64], g: &mut [f64]| -> f64 {
        let z = matvec(&bt, d);
        g.fill(0.0);
        let mut val = 0.0;
        for i in 0..n {
            let arg = a_alpha[i] + z[i] - rho;
            val += loss.value(arg);
            let w = loss.grad(arg) / n as f64;
            if w != 0.0 {
                for (gt, bit) in g.iter_mut().zip(bt.row(i)) {
                    *gt += w * bit;
                }
            }
        }
        val / n as f64
    };
    let problem = SmoothConstrainedProblem {
        objective: &objective,
        constraint: Some(SmoothConstraint {
            func: &constraint,
            bound: layout.gamma,
        }),
        lower: vec![0.0; p],
        upper: vec![1.0; p],
        l1: c2,
    };
    let outcome = solve_smooth_constrained(&problem, d_prev.as_slice(), opts);
    // A slightly infeasible surrogate solution is still a usable direction:
    // the line search checks the true constraint.
    if !outcome.x.iter().all(|v| v.is_finite()) {
        return Ok(DStep {
            d: d_prev.clone(),
            outcome: Some(outcome),
            stalled: true,
        });
    }
    Ok(DStep {
        d: WeightVector::from_clamped(outcome.x.clone()),
        outcome: Some(outcome),
        stalled: false,
    })
}

#[derive(Debug, Clone)]
pub struct LineSearch {
    pub step: f64,
    pub d: Vec<f64>,
    pub value: f64,
    pub stalled: bool,
}

/// Backtrack from `ν = 1` by halving until `objective(d_prev + νΔd)` drops
/// below `f_prev − 1e−12`. `objective` returns `None` for infeasible
/// trial points.
pub fn line_search<F>(d_prev: &[f64], f_prev: f64, d_cv: &[f64], min_step: f64, mut objective: F) -> LineSearch
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let mut nu = 1.0;
    let mut trial = vec![0.0; d_prev.len()];
    while nu >= min_step {
        for (t, (a, b)) in trial.iter_mut().zip(d_prev.iter().zip(d_cv)) {
            *t = (a + nu * (b - a)).clamp(0.0, 1.0);
        }
        if let Some(v) = objective(&trial) {
            if v < f_prev - 1e-12 {
                return LineSearch {
                    step: nu,
                    d: trial,
                    value: v,
                    stalled: false,
                };
            }
        }
        nu *= 0.5;
    }
    LineSearch {
        step: 0.0,
        d: d_prev.to_vec(),
        value: f_prev,
        stalled: true,
    }
}

/// Everything produced by one feature-selection fit.
#[derive(Debug, Clone)]
pub struct KfsFit {
    pub function: DecisionFunction,
    pub state: KfsState,
    /// Ψ after every accepted update, in order.
    pub history: Vec<f64>,
    pub outer_iterations: usize,
    pub stalled: bool,
    pub converged: bool,
}

struct Evaluator<'a> {
    kernel: KernelSpec,
    points: &'a Array2<f64>,
    loss: LossSpec,
    c1: f64,
    c2: f64,
    layout: Layout,
}

impl Evaluator<'_> {
    fn eval(&self, k: &Array2<f64>, alpha: &[f64], rho: f64, d: &WeightVector) -> (f64, f64) {
        let u = matvec(k, alpha);
        let n = self.layout.n_train;
        (
            smooth_objective(&self.loss, self.c1, alpha, &u, rho, n) + self.c2 * d.l1(),
            constraint_value(&self.loss, &u, rho, n),
        )
    }

    fn kernel(&self, d: &WeightVector) -> Result<Array2<f64>> {
        kernel_matrix(&self.kernel, d, self.points)
    }
}

fn inf_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dump(state: &KfsState) -> String {
    format!(
        "rho={:.17e} d={:?} alpha[..{}]={:?}",
        state.rho,
        state.d.as_slice(),
        state.alpha.len().min(8),
        &state.alpha[..state.alpha.len().min(8)]
    )
}

pub fn fit_gpskfs(input: &ClassTrainingInput<'_>, opts: &KfsOptions) -> Result<KfsFit> {
    input.validate()?;
    opts.validate()?;
    sigma_of(&input.kernel)?;
    let gamma = input.effective_gamma()?;
    let points = ndarray::concatenate(Axis(0), &[input.train, input.test])
        .map_err(|e| GpsError::Internal(e.to_string()))?
        .as_standard_layout()
        .into_owned();
    let n_all = points.nrows();
    let layout = Layout {
        n_train: input.train.nrows(),
        gamma,
    };
    let ev = Evaluator {
        kernel: input.kernel,
        points: &points,
        loss: opts.loss,
        c1: opts.c1,
        c2: opts.c2,
        layout,
    };

    let mut d = input.d.clone();
    let mut k = ev.kernel(&d)?;
    let mut alpha = vec![0.0; n_all];
    let mut rho = 0.0;
    let mut current: Option<f64> = None;
    let mut history = Vec::new();
    let mut stalled = false;
    let mut converged = false;
    let mut outer = 0;

    let check_descent = |prev: Option<f64>, next: f64, state: &KfsState| -> Result<()> {
        if let Some(prev) = prev {
            if next > prev + DESCENT_TOL {
                return Err(GpsError::Internal(format!(
                    "feature-selection objective increased from {prev:.17e} to {next:.17e}; {}",
                    dump(state)
                )));
            }
        }
        Ok(())
    };

    while outer < opts.max_outer {
        outer += 1;
        let (alpha_prev, rho_prev, d_prev) = (alpha.clone(), rho, d.clone());

        let step = solve_alpha_rho(&k, layout, opts.c1, &opts.loss, &opts.qp)?;
        log::debug!("outer {outer}: alpha-rho {}", step.report);
        let (psi_new, c_new) = ev.eval(&k, &step.alpha, step.rho, &d);
        let improves = match current {
            None => true,
            Some(psi) => psi_new <= psi,
        };
        if c_new <= gamma + FEASIBILITY_TOL && improves {
            alpha = step.alpha;
            rho = step.rho;
            current = Some(psi_new);
            history.push(psi_new);
        } else if current.is_none() {
            return Err(GpsError::Solver {
                msg: "coefficient step returned an infeasible iterate".into(),
                report: step.report,
            });
        }
        let mut psi = current.expect("initialized");

        for _ in 0..opts.max_inner {
            let lin = linearize(&input.kernel, &d, &alpha, points.view())?;
            let ds = solve_d_step(&lin, &alpha, rho, opts.c1, opts.c2, layout, &opts.loss, &d, &opts.smooth)?;
            if let Some(o) = &ds.outcome {
                log::debug!("outer {outer}: d-step {}", o.report);
            }
            if ds.stalled || inf_diff(ds.d.as_slice(), d.as_slice()) == 0.0 {
                stalled |= ds.stalled;
                break;
            }
            let mut trial_kernel = None;
            let ls = line_search(d.as_slice(), psi, ds.d.as_slice(), opts.min_step, |cand| {
                let cand = WeightVector::from_clamped(cand.to_vec());
                let kc = ev.kernel(&cand).ok()?;
                let (v, c) = ev.eval(&kc, &alpha, rho, &cand);
                trial_kernel = Some(kc);
                (c <= gamma + FEASIBILITY_TOL).then_some(v)
            });
            if ls.stalled {
                stalled = true;
                break;
            }
            let new_d = WeightVector::from_clamped(ls.d);
            let change = inf_diff(new_d.as_slice(), d.as_slice());
            d = new_d;
            k = trial_kernel.take().expect("accepted trial kernel");
            let state = KfsState {
                alpha: alpha.clone(),
                rho,
                d: d.clone(),
                objective: ls.value,
            };
            check_descent(Some(psi), ls.value, &state)?;
            psi = ls.value;
            history.push(psi);
            if change < opts.tol {
                break;
            }
        }
        current = Some(psi);

        let change = inf_diff(&alpha, &alpha_prev)
            .max((rho - rho_prev).abs())
            .max(inf_diff(d.as_slice(), d_prev.as_slice()));
        if change < opts.tol {
            converged = true;
            break;
        }
        if stalled {
            break;
        }
    }
    for w in history.windows(2) {
        if w[1] > w[0] + DESCENT_TOL {
            return Err(GpsError::Internal(format!(
                "feature-selection objective history not monotone: {:.17e} -> {:.17e}",
                w[0], w[1]
            )));
        }
    }

    let objective = current.expect("at least one accepted iterate");
    let function = DecisionFunction::from_representers(input.kernel, d.clone(), points.view(), &alpha, rho)?;
    Ok(KfsFit {
        function,
        state: KfsState {
            alpha,
            rho,
            d,
            objective,
        },
        history,
        outer_iterations: outer,
        stalled,
        converged,
    })
}

pub fn train_gpskfs(input: &ClassTrainingInput<'_>, c1: f64, c2: f64) -> Result<DecisionFunction> {
    Ok(fit_gpskfs(input, &KfsOptions::new(c1, c2))?.function)
}
