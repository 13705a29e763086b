use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::smo::{SmoOutcome, SmoProblem};
use super::{SolverReport, SolverStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{GpsError, Result};
use crate::kernel::GramBlocks;

/// Per-class dual problem over the stacked variables `v = (α, β)` plus `θ`:
///
/// ```text
/// min ½ vᵀHv − 1ᵀv + n_k γ θ
/// s.t. 0 ≤ α ≤ θ, 0 ≤ β ≤ C, 1ᵀα − 1ᵀβ = 1, θ ≥ 0
/// ```
///
/// with `H = [[G1, −G3], [−G3ᵀ, G2]]`.
///
/// A positive `delta` gives the dual of the Huberized squared hinge loss
/// instead: the linear term becomes `−(1 + δ)1ᵀv` and
/// `δ(‖α‖²/θ + ‖β‖²/C)` is added.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: Array2<f64>,
    pub n_train: usize,
    pub c: f64,
    pub gamma: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub theta: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Verify `H ⪰ −1e−8·trace(H)·I` before solving. Costs one dense
    /// factorization; skip it for matrices assembled from a valid kernel.
    pub check_psd: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            check_psd: true,
        }
    }
}

impl QpProblem {
    pub fn from_blocks(blocks: &GramBlocks, c: f64, gamma: f64) -> Self {
        let n = blocks.g1.nrows();
        let m = blocks.g2.nrows();
        let mut h = Array2::zeros((n + m, n + m));
        h.slice_mut(s![..n, ..n]).assign(&blocks.g1);
        h.slice_mut(s![n.., n..]).assign(&blocks.g2);
        h.slice_mut(s![..n, n..]).assign(&blocks.g3.mapv(|v| -v));
        h.slice_mut(s![n.., ..n]).assign(&blocks.g3.t().mapv(|v| -v));
        QpProblem {
            h,
            n_train: n,
            c,
            gamma,
            delta: 0.0,
        }
    }

    pub fn huberized(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn n_test(&self) -> usize {
        self.h.nrows() - self.n_train
    }

    pub fn validate(&self, check_psd: bool) -> Result<()> {
        let dim = self.h.nrows();
        if self.h.ncols() != dim {
            return Err(GpsError::input("H must be square"));
        }
        if self.n_train == 0 || self.n_train > dim {
            return Err(GpsError::input("dual QP needs at least one training variable"));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(GpsError::input(format!("C must be positive, got {}", self.c)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(GpsError::input(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(GpsError::input(format!("delta must be nonnegative, got {}", self.delta)));
        }
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (self.h[[i, j]], self.h[[j, i]]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(GpsError::input("H must be symmetric"));
                }
            }
        }
        if check_psd && !is_psd(&self.h) {
            return Err(GpsError::input("H is not positive semidefinite"));
        }
        Ok(())
    }

    pub fn objective(&self, alpha: &[f64], beta: &[f64], theta: f64) -> f64 {
        let v: Vec<f64> = alpha.iter().chain(beta).copied().collect();
        let hv = self.h.dot(&ndarray::ArrayView1::from(&v));
        let quad: f64 = v.iter().zip(hv.iter()).map(|(a, b)| a * b).sum();
        let mut value = 0.5 * quad - (1.0 + self.delta) * v.iter().sum::<f64>() + self.n_train as f64 * theta * self.gamma;
        if self.delta > 0.0 {
            let sa: f64 = alpha.iter().map(|a| a * a).sum();
            let sb: f64 = beta.iter().map(|b| b * b).sum();
            value += self.delta * (sa / theta + sb / self.c);
        }
        value
    }
}

/// `H + 2e-8·trace·I` admits a Cholesky factor.
pub(crate) fn is_psd(h: &Array2<f64>) -> bool {
    let n = h.nrows();
    let trace: f64 = (0..n).map(|i| h[[i, i]]).sum();
    let shift = 2e-8 * trace.abs().max(1e-300);
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| h[[i, j]] + if i == j { shift } else { 0.0 });
    m.cholesky().is_some()
}

struct Evaluation {
    theta: f64,
    smo: SmoOutcome,
    phi: f64,
    dphi: f64,
}

struct ThetaSearch<'a> {
    problem: &'a QpProblem,
    q: &'a Array2<f64>,
    p: Vec<f64>,
    y: Vec<f64>,
    eps: f64,
    max_iter: usize,
    iterations: usize,
}

impl ThetaSearch<'_> {
    /// Make a warm start feasible for the given `θ`.
    fn repair(&self, warm: Option<&[f64]>, theta: f64) -> Vec<f64> {
        let n = self.problem.n_train;
        let dim = self.q.nrows();
        let Some(warm) = warm else {
            let mut a = vec![0.0; dim];
            a[..n].fill(1.0 / n as f64);
            return a;
        };
        let mut a = warm.to_vec();
        for v in &mut a[..n] {
            *v = v.min(theta);
        }
        let mut deficit = 1.0 + a[n..].iter().sum::<f64>() - a[..n].iter().sum::<f64>();
        // Shrink β first, then raise α toward θ.
        for v in &mut a[n..] {
            if deficit <= 0.0 {
                break;
            }
            let cut = v.min(deficit);
            *v -= cut;
            deficit -= cut;
        }
        for v in &mut a[..n] {
            if deficit <= 0.0 {
                break;
            }
            let room = (theta - *v).min(deficit);
            *v += room;
            deficit -= room;
        }
        if deficit < 0.0 {
            // Too much α mass: lower α values.
            let mut excess = -deficit;
            for v in &mut a[..n] {
                if excess <= 0.0 {
                    break;
                }
                let cut = v.min(excess);
                *v -= cut;
                excess -= cut;
            }
        }
        a
    }

    fn evaluate(&mut self, theta: f64, warm: Option<&[f64]>) -> Evaluation {
        let n = self.problem.n_train;
        let dim = self.q.nrows();
        let upper: Vec<f64> = (0..dim)
            .map(|i| if i < n { theta } else { self.problem.c })
            .collect();
        let a0 = self.repair(warm, theta);
        let delta = self.problem.delta;
        let shifted;
        let q = if delta > 0.0 {
            let mut q = self.q.clone();
            for i in 0..dim {
                q[[i, i]] += 2.0 * delta / upper[i];
            }
            shifted = q;
            &shifted
        } else {
            self.q
        };
        let smo = SmoProblem {
            q,
            p: &self.p,
            y: &self.y,
            upper: &upper,
        }
        .solve(a0, self.eps * theta.max(1.0), self.max_iter);
        self.iterations += smo.iterations;
        let nk_gamma = n as f64 * self.problem.gamma;
        let phi = smo.objective(&self.p) + nk_gamma * theta;
        let pressure: f64 = (0..n)
            .filter(|&i| smo.a[i] >= theta)
            .map(|i| (smo.b - smo.grad[i]).max(0.0))
            .sum();
        let ridge = if delta > 0.0 {
            delta * smo.a[..n].iter().map(|a| a * a).sum::<f64>() / (theta * theta)
        } else {
            0.0
        };
        Evaluation {
            theta,
            phi,
            dphi: nk_gamma - pressure - ridge,
            smo,
        }
    }
}

/// Solve the per-class dual QP.
///
/// The objective is linear and increasing in `θ`, whose only other coupling is
/// `α ≤ θ·1`. For fixed `θ` the remaining problem is a box- and
/// equality-constrained QP solved by SMO; its optimal value `V(θ)` is convex,
/// so `V(θ) + n_k γ θ` is minimized by a safeguarded regula-falsi search on
/// its derivative over `θ ∈ [1/n_k, 1 + mC]`.
pub fn solve_dual_qp(problem: &QpProblem, opts: &QpOptions) -> Result<(DualSolution, SolverReport)> {
    problem.validate(opts.check_psd)?;
    let n = problem.n_train;
    let dim = problem.h.nrows();
    let m = dim - n;
    let h = problem.h.as_standard_layout().into_owned();
    let mut search = ThetaSearch {
        problem,
        q: &h,
        p: vec![-(1.0 + problem.delta); dim],
        y: (0..dim).map(|i| if i < n { 1.0 } else { -1.0 }).collect(),
        eps: (opts.tol * 1e-2).max(1e-12),
        max_iter: opts.max_iter.max(100 * dim),
        iterations: 0,
    };

    let theta_min = 1.0 / n as f64;
    // Beyond 1 + mC the bound α ≤ θ can no longer bind.
    let mut theta_cap = 2.0 + m as f64 * problem.c;
    if problem.delta > 0.0 {
        theta_cap *= (problem.delta / (n as f64 * problem.gamma)).sqrt().max(1.0);
    }
    let max_evaluations = 200;

    struct End {
        theta: f64,
        g: f64,
        a: Vec<f64>,
    }
    let end = |ev: &Evaluation| End {
        theta: ev.theta,
        g: ev.dphi,
        a: ev.smo.a.clone(),
    };

    let first = search.evaluate(problem.c.clamp(theta_min, theta_cap), None);
    let mut evaluations = 1usize;
    let mut lo: Option<End> = None;
    let mut hi: Option<End> = None;
    if first.dphi < 0.0 {
        lo = Some(end(&first));
    } else {
        hi = Some(end(&first));
    }
    let mut best = first;
    let consider = |ev: Evaluation, best: &mut Evaluation| {
        if ev.phi < best.phi {
            *best = ev;
        }
    };

    // Bracket the sign change of the derivative by factors of four.
    loop {
        let (t, warm) = match (&lo, &hi) {
            (Some(l), None) => ((4.0 * l.theta).min(theta_cap), l.a.clone()),
            (None, Some(h)) if h.theta > theta_min => ((0.25 * h.theta).max(theta_min), h.a.clone()),
            _ => break,
        };
        let ev = search.evaluate(t, Some(&warm));
        evaluations += 1;
        if ev.dphi < 0.0 && t < theta_cap {
            lo = Some(end(&ev));
        } else {
            hi = Some(end(&ev));
            if ev.dphi < 0.0 {
                lo = None;
            }
        }
        let at_limit = (lo.is_none() && t <= theta_min) || (hi.is_none() && t >= theta_cap);
        consider(ev, &mut best);
        if at_limit || evaluations >= max_evaluations {
            break;
        }
    }

    let mut g_residual = 0.0;
    if let (Some(mut l), Some(mut h)) = (lo, hi) {
        let mut side = 0i8;
        let (mut lg, mut hg) = (l.g, h.g);
        loop {
            let width = h.theta - l.theta;
            let scale = best.phi.abs().max(1.0);
            let bound = l.g.abs().min(h.g.abs()) * width / scale;
            g_residual = bound;
            if bound <= opts.tol * 1e-2 || width <= 1e-12 * h.theta || evaluations >= max_evaluations {
                break;
            }
            let mut t = if h.theta > 4.0 * l.theta {
                (l.theta * h.theta).sqrt()
            } else {
                h.theta - hg * width / (hg - lg)
            };
            if !(t > l.theta + 0.01 * width && t < h.theta - 0.01 * width) {
                t = 0.5 * (l.theta + h.theta);
            }
            let warm = if t - l.theta < h.theta - t { &l.a } else { &h.a };
            let ev = search.evaluate(t, Some(warm));
            evaluations += 1;
            if ev.dphi < 0.0 {
                l = end(&ev);
                lg = ev.dphi;
                if side == -1 {
                    hg *= 0.5;
                }
                side = -1;
            } else {
                h = end(&ev);
                hg = ev.dphi;
                if side == 1 {
                    lg *= 0.5;
                }
                side = 1;
            }
            consider(ev, &mut best);
        }
    }
    log::trace!("dual QP: {evaluations} theta evaluations, {} SMO iterations", search.iterations);

    let a = best.smo.a;
    let alpha = a[..n].to_vec();
    let beta = a[n..].to_vec();
    // θ only needs to dominate α.
    let theta = if problem.delta > 0.0 {
        best.theta
    } else {
        alpha.iter().copied().fold(0.0, f64::max).min(best.theta)
    };
    let objective = problem.objective(&alpha, &beta, theta);

    let eq = (alpha.iter().sum::<f64>() - beta.iter().sum::<f64>() - 1.0).abs();
    let bound_viol = alpha
        .iter()
        .map(|&v| (-v).max(v - theta))
        .chain(beta.iter().map(|&v| (-v).max(v - problem.c)))
        .fold(0.0, f64::max);
    let primal_residual = eq.max(bound_viol);
    let dual_residual = (best.smo.gap / best.theta.max(1.0)).max(g_residual);
    let status = if primal_residual <= opts.tol && dual_residual <= opts.tol {
        SolverStatus::Converged
    } else {
        SolverStatus::MaxIter
    };
    let report = SolverReport {
        objective,
        primal_residual,
        dual_residual,
        iterations: search.iterations,
        status,
    };
    Ok((
        DualSolution {
            alpha,
            beta,
            theta,
            objective,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{gram_blocks, KernelSpec, WeightVector};
    use ndarray::array;

    fn one_plus_one(gamma: f64) -> QpProblem {
        let blocks = gram_blocks(
            &KernelSpec::Linear,
            &WeightVector::ones(1),
            array![[1.0]].view(),
            array![[-1.0]].view(),
        )
        .unwrap();
        QpProblem::from_blocks(&blocks, 1.0, gamma)
    }

    #[test]
    fn analytic_one_plus_one_instance() {
        let (sol, report) = solve_dual_qp(&one_plus_one(0.05), &QpOptions::default()).unwrap();
        assert!(report.is_converged(), "{report}");
        assert!((sol.alpha[0] - 1.0).abs() < 1e-9);
        assert!(sol.beta[0].abs() < 1e-9);
        assert!((sol.theta - 1.0).abs() < 1e-9);
        assert!((sol.objective + 0.45).abs() < 1e-9);
    }

    #[test]
    fn gamma_shifts_objective_only() {
        for gamma in [0.01, 0.3, 0.7, 0.99] {
            let (sol, _) = solve_dual_qp(&one_plus_one(gamma), &QpOptions::default()).unwrap();
            assert!((sol.alpha[0] - 1.0).abs() < 1e-9);
            assert!(sol.beta[0].abs() < 1e-9);
            assert!((sol.theta - 1.0).abs() < 1e-9);
            assert!((sol.objective - (gamma - 0.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = one_plus_one(0.05);
        p.gamma = 1.5;
        assert!(solve_dual_qp(&p, &QpOptions::default()).is_err());
        let mut p = one_plus_one(0.05);
        p.c = 0.0;
        assert!(solve_dual_qp(&p, &QpOptions::default()).is_err());
        let p = QpProblem {
            h: array![[1.0, 0.0], [0.0, -1.0]],
            n_train: 1,
            c: 1.0,
            gamma: 0.1,
            delta: 0.0,
        };
        assert!(matches!(
            solve_dual_qp(&p, &QpOptions::default()),
            Err(GpsError::Input(_))
        ));
    }
}
