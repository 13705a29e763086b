//! Smooth convex minimization with one smooth convex inequality constraint.
//!
//! Augmented-Lagrangian outer loop around a proximal-gradient inner solver.
//! The inner solver takes Barzilai-Borwein trial steps with nonmonotone
//! backtracking against the worst of the last few merit values. The proximal
//! map covers the box and an optional ℓ1 term.

use super::{SolverReport, SolverStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};

pub type SmoothFn<'a> = dyn Fn(&[f64], &mut [f64]) -> f64 + Sync + 'a;

/// `func(x) ≤ bound`.
pub struct SmoothConstraint<'a> {
    pub func: &'a SmoothFn<'a>,
    pub bound: f64,
}

pub struct SmoothConstrainedProblem<'a> {
    /// Writes the gradient into the second argument and returns the value.
    pub objective: &'a SmoothFn<'a>,
    pub constraint: Option<SmoothConstraint<'a>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Weight on `||x||₁`.
    pub l1: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SmoothOptions {
    pub tol: f64,
    /// Inner iterations per augmented-Lagrangian round.
    pub max_iter: usize,
    pub max_outer: usize,
    pub penalty_growth: f64,
    pub initial_penalty: f64,
    /// Keep the per-iteration merit values for inspection.
    pub record_merit: bool,
}

impl Default for SmoothOptions {
    fn default() -> Self {
        SmoothOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            max_outer: 8,
            penalty_growth: 10.0,
            initial_penalty: 10.0,
            record_merit: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoothOutcome {
    pub x: Vec<f64>,
    pub report: SolverReport,
    /// Constraint multiplier estimate.
    pub multiplier: f64,
    /// Constraint value at `x` (NaN when unconstrained).
    pub constraint_value: f64,
    /// Merit values of each inner solve, one vector per round.
    pub merit_trace: Vec<Vec<f64>>,
}

impl SmoothConstrainedProblem<'_> {
    fn prox(&self, v: &[f64], step: f64, out: &mut [f64]) {
        let shrink = step * self.l1;
        for (i, (o, &vi)) in out.iter_mut().zip(v).enumerate() {
            let s = if shrink > 0.0 {
                vi.signum() * (vi.abs() - shrink).max(0.0)
            } else {
                vi
            };
            *o = s.clamp(self.lower[i], self.upper[i]);
        }
    }

    fn l1_term(&self, x: &[f64]) -> f64 {
        if self.l1 > 0.0 {
            self.l1 * x.iter().map(|v| v.abs()).sum::<f64>()
        } else {
            0.0
        }
    }

    /// Smooth part of the augmented Lagrangian and its gradient, for the
    /// constraint `scale·(c(x) − bound) ≤ 0`.
    fn al_smooth(&self, x: &[f64], al: Penalty, grad: &mut [f64], scratch: &mut [f64]) -> f64 {
        let mut f = (self.objective)(x, grad);
        if let Some(c) = &self.constraint {
            let cv = al.scale * ((c.func)(x, scratch) - c.bound);
            let shifted = (al.lambda + al.mu * cv).max(0.0);
            f += (shifted * shifted - al.lambda * al.lambda) / (2.0 * al.mu);
            if shifted > 0.0 {
                for (g, s) in grad.iter_mut().zip(scratch.iter()) {
                    *g += shifted * al.scale * s;
                }
            }
        }
        f
    }

    fn constraint_value(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        match &self.constraint {
            Some(c) => (c.func)(x, scratch),
            None => f64::NAN,
        }
    }
}

struct InnerResult {
    iterations: usize,
    residual: f64,
    merit: Vec<f64>,
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn inner_solve(
    prob: &SmoothConstrainedProblem<'_>,
    x: &mut Vec<f64>,
    al: Penalty,
    opts: &SmoothOptions,
) -> InnerResult {
    let n = x.len();
    let mut grad = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut f = prob.al_smooth(x, al, &mut grad, &mut scratch);
    let mut merit = Vec::new();
    if opts.record_merit {
        merit.push(f + prob.l1_term(x));
    }
    let mut step = 1.0 / grad.iter().map(|g| g.abs()).fold(1.0, f64::max);
    let mut recent = vec![f + prob.l1_term(x)];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        // Prox-gradient mapping with unit step, relative to the merit value,
        // as the stationarity measure.
        for i in 0..n {
            tmp[i] = x[i] - grad[i];
        }
        prob.prox(&tmp, 1.0, &mut trial);
        residual = inf_norm_diff(x, &trial) / (1.0 + f.abs());
        if residual <= opts.tol {
            break;
        }
        iterations += 1;
        // Nonmonotone acceptance against the worst of the recent merit values.
        let reference = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut accepted = false;
        let mut f_trial = f;
        for _ in 0..60 {
            for i in 0..n {
                tmp[i] = x[i] - step * grad[i];
            }
            prob.prox(&tmp, step, &mut trial);
            f_trial = prob.al_smooth(&trial, al, &mut trial_grad, &mut scratch);
            let sq: f64 = trial.iter().zip(x.iter()).map(|(t, v)| (t - v) * (t - v)).sum();
            let h_new = prob.l1_term(&trial);
            let slack = 1e-14 * reference.abs().max(1.0);
            if f_trial + h_new <= reference - 1e-4 * sq / (2.0 * step) + slack {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        // Barzilai-Borwein step for the next iteration.
        let mut sy = 0.0;
        let mut ss = 0.0;
        for i in 0..n {
            let s = trial[i] - x[i];
            let y = trial_grad[i] - grad[i];
            sy += s * y;
            ss += s * s;
        }
        std::mem::swap(x, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        f = f_trial;
        let total = f + prob.l1_term(x);
        if recent.len() == NONMONOTONE_WINDOW {
            recent.remove(0);
        }
        recent.push(total);
        if opts.record_merit {
            merit.push(total);
        }
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { step * 2.0 };
        if ss == 0.0 {
            break;
        }
    }
    InnerResult {
        iterations,
        residual,
        merit,
    }
}

const MAX_PENALTY: f64 = 1e10;
const NONMONOTONE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy)]
struct Penalty {
    lambda: f64,
    mu: f64,
    scale: f64,
}

/// Constraint scale matching `‖∇c‖∞` to `‖∇f‖∞` at `x`, and the first-order
/// multiplier estimate `max(0, −⟨∇f, ∇c̃⟩ / ‖∇c̃‖²)` for the scaled constraint.
fn initial_penalty(problem: &SmoothConstrainedProblem<'_>, x: &[f64], mu: f64) -> Penalty {
    let mut al = Penalty {
        lambda: 0.0,
        mu,
        scale: 1.0,
    };
    let Some(c) = &problem.constraint else {
        return al;
    };
    let n = x.len();
    let mut gc = vec![0.0; n];
    (c.func)(x, &mut gc);
    let mut gf = vec![0.0; n];
    (problem.objective)(x, &mut gf);
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let (nf, nc) = (inf(&gf), inf(&gc));
    if nc > 0.0 && nf.is_finite() && nc.is_finite() {
        al.scale = (nf.max(1.0) / nc).clamp(1e-8, 1e8);
    }
    let dot: f64 = gf.iter().zip(&gc).map(|(a, b)| a * b).sum::<f64>() * al.scale;
    let norm: f64 = gc.iter().map(|g| g * g).sum::<f64>() * al.scale * al.scale;
    if norm > 0.0 && dot.is_finite() {
        al.lambda = (-dot / norm).max(0.0);
    }
    al
}

/// Minimize the problem from `start` (projected into the box first).
pub fn solve_smooth_constrained(
    problem: &SmoothConstrainedProblem<'_>,
    start: &[f64],
    opts: &SmoothOptions,
) -> SmoothOutcome {
    let n = start.len();
    assert_eq!(problem.lower.len(), n, "lower bound length");
    assert_eq!(problem.upper.len(), n, "upper bound length");
    let mut x: Vec<f64> = start
        .iter()
        .enumerate()
        .map(|(i, v)| v.clamp(problem.lower[i], problem.upper[i]))
        .collect();
    let mut scratch = vec![0.0; n];
    let mut al = initial_penalty(problem, &x, opts.initial_penalty);
    let mut prev_viol = f64::INFINITY;
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    let mut viol = 0.0;
    let mut converged = false;
    let rounds = if problem.constraint.is_some() { opts.max_outer.max(1) } else { 1 };
    for _ in 0..rounds {
        let inner = inner_solve(problem, &mut x, al, opts);
        iterations += inner.iterations;
        log::trace!("AL round: {al:?} inner={} residual={:.2e}", inner.iterations, inner.residual);
        residual = inner.residual;
        if opts.record_merit {
            trace.push(inner.merit);
        }
        let Some(c) = &problem.constraint else {
            converged = residual <= opts.tol;
            break;
        };
        let cv = (c.func)(&x, &mut scratch) - c.bound;
        viol = cv.max(0.0);
        let new_lambda = (al.lambda + al.mu * al.scale * cv).max(0.0);
        let complementarity = (new_lambda * al.scale * cv).abs();
        let multiplier_change = (new_lambda - al.lambda).abs();
        al.lambda = new_lambda;
        if residual <= opts.tol
            && viol <= opts.tol
            && (complementarity <= opts.tol * (1.0 + al.lambda) || multiplier_change <= opts.tol * (1.0 + al.lambda))
        {
            converged = true;
            break;
        }
        if viol > opts.tol && viol > 0.25 * prev_viol {
            al.mu = (al.mu * opts.penalty_growth).min(MAX_PENALTY);
        }
        prev_viol = viol;
    }
    let mut g = vec![0.0; n];
    let objective = (problem.objective)(&x, &mut g) + problem.l1_term(&x);
    let constraint_value = problem.constraint_value(&x, &mut scratch);
    let status = if converged {
        SolverStatus::Converged
    } else if viol > opts.tol {
        SolverStatus::Infeasible
    } else {
        SolverStatus::MaxIter
    };
    SmoothOutcome {
        x,
        report: SolverReport {
            objective,
            primal_residual: viol,
            dual_residual: residual,
            iterations,
            status,
        },
        multiplier: al.lambda * al.scale,
        constraint_value,
        merit_trace: trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(x: &[f64], g: &mut [f64]) -> f64 {
        g[0] = x[0] - 1.0;
        0.5 * x[0] * x[0] - x[0]
    }

    #[test]
    fn interior_stationary_point() {
        let p = SmoothConstrainedProblem {
            objective: &quad,
            constraint: None,
            lower: vec![0.0],
            upper: vec![10.0],
            l1: 0.0,
        };
        let out = solve_smooth_constrained(&p, &[7.0], &SmoothOptions::default());
        assert!(out.report.is_converged());
        assert!((out.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn active_upper_bound() {
        let p = SmoothConstrainedProblem {
            objective: &quad,
            constraint: None,
            lower: vec![0.0],
            upper: vec![0.5],
            l1: 0.0,
        };
        let out = solve_smooth_constrained(&p, &[0.0], &SmoothOptions::default());
        assert_eq!(out.x[0], 0.5);
    }

    #[test]
    fn l1_soft_thresholds() {
        // ½x² − x + 0.4|x| → x = 0.6
        let p = SmoothConstrainedProblem {
            objective: &quad,
            constraint: None,
            lower: vec![-10.0],
            upper: vec![10.0],
            l1: 0.4,
        };
        let out = solve_smooth_constrained(&p, &[-3.0], &SmoothOptions::default());
        assert!((out.x[0] - 0.6).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn active_inequality_constraint() {
        // min (x−2)² + (y−2)²  s.t.  x + y ≤ 2  → (1, 1), multiplier 2.
        let obj = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 2.0);
            g[1] = 2.0 * (x[1] - 2.0);
            (x[0] - 2.0).powi(2) + (x[1] - 2.0).powi(2)
        };
        let con = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            g[1] = 1.0;
            x[0] + x[1]
        };
        let p = SmoothConstrainedProblem {
            objective: &obj,
            constraint: Some(SmoothConstraint { func: &con, bound: 2.0 }),
            lower: vec![-5.0; 2],
            upper: vec![5.0; 2],
            l1: 0.0,
        };
        let opts = SmoothOptions {
            record_merit: true,
            ..Default::default()
        };
        let out = solve_smooth_constrained(&p, &[0.0, 0.0], &opts);
        assert!(out.report.is_converged(), "{}", out.report);
        assert!((out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5);
        assert!(out.constraint_value <= 2.0 + 1e-6);
        assert!((out.multiplier - 2.0).abs() < 1e-3);
        for round in &out.merit_trace {
            for (i, v) in round.iter().enumerate().skip(1) {
                let window = &round[i.saturating_sub(10)..i];
                assert!(*v <= window.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-12);
            }
        }
    }
}
