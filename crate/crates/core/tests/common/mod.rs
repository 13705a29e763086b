#![allow(dead_code)]

use gpset::kernel::{eval_weighted, gram_blocks, KernelSpec, WeightVector};
use gpset::solver::QpProblem;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.5..1.5))
}

pub fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let train = random_points(rng, n);
    let test = random_points(rng, m);
    let kernel = KernelSpec::gaussian(rng.random_range(0.5..2.0)).unwrap();
    let blocks = gram_blocks(&kernel, &WeightVector::ones(2), train.view(), test.view()).unwrap();
    let c = rng.random_range(0.1..2.0);
    let gamma = rng.random_range(0.05..0.5);
    QpProblem::from_blocks(&blocks, c, gamma)
}

/// `½vᵀHv − (1+δ)1ᵀv + δ(‖α‖²/θ + ‖β‖²/C) + nγθ`, written out directly.
pub fn dual_value(p: &QpProblem, v: &[f64], theta: f64) -> f64 {
    let dim = v.len();
    let mut quad = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            quad += v[i] * p.h[[i, j]] * v[j];
        }
    }
    let n = p.n_train;
    let mut ridge = 0.0;
    if p.delta > 0.0 {
        ridge = v[..n].iter().map(|a| a * a).sum::<f64>() / theta + v[n..].iter().map(|b| b * b).sum::<f64>() / p.c;
    }
    0.5 * quad - (1.0 + p.delta) * v.iter().sum::<f64>() + p.delta * ridge + n as f64 * p.gamma * theta
}

/// Minimum over a lattice of the feasible polytope: every variable except
/// `α₀` on a uniform grid of its box, `α₀` fixed by the equality.
pub fn grid_minimum(p: &QpProblem, levels: usize, theta_levels: usize) -> f64 {
    let n = p.n_train;
    let m = p.n_test();
    let free = n - 1 + m;
    let theta_max = 1.0 + m as f64 * p.c;
    let theta_min = 1.0 / n as f64;
    let mut best = f64::INFINITY;
    let mut v = vec![0.0; n + m];
    let mut idx = vec![0usize; free];
    for ti in 0..theta_levels {
        let theta = theta_min + (theta_max - theta_min) * ti as f64 / (theta_levels - 1) as f64;
        idx.iter_mut().for_each(|x| *x = 0);
        loop {
            for (slot, &k) in idx.iter().enumerate() {
                let frac = k as f64 / (levels - 1) as f64;
                if slot < n - 1 {
                    v[slot + 1] = theta * frac;
                } else {
                    v[slot + 1] = p.c * frac;
                }
            }
            let alpha0 = 1.0 + v[n..].iter().sum::<f64>() - v[1..n].iter().sum::<f64>();
            if (0.0..=theta).contains(&alpha0) {
                v[0] = alpha0;
                best = best.min(dual_value(p, &v, theta));
            }
            let mut carry = 0;
            while carry < free {
                idx[carry] += 1;
                if idx[carry] < levels {
                    break;
                }
                idx[carry] = 0;
                carry += 1;
            }
            if carry == free {
                break;
            }
        }
    }
    best
}

/// Index-order root of the budget equation over `{i : g_i − 1 ≤ t}`.
pub fn root_for_threshold(g: &[f64], t: f64, budget: f64) -> f64 {
    let mut count = 0usize;
    let mut slack = 0.0;
    for &gi in g {
        if gi - 1.0 <= t {
            count += 1;
            slack += 1.0 - gi;
        }
    }
    (budget - slack) / count as f64
}

/// Scan the sorted breakpoints and keep the last segment whose root lies
/// between its own breakpoint and the next one.
pub fn breakpoint_scan(g: &[f64], gamma: f64) -> f64 {
    let budget = g.len() as f64 * gamma;
    let mut bps: Vec<f64> = g.iter().map(|x| x - 1.0).collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    let mut answer = None;
    for (k, &t) in bps.iter().enumerate() {
        let r = root_for_threshold(g, t, budget);
        let below_next = bps.get(k + 1).is_none_or(|&next| r <= next);
        if r >= t && below_next {
            answer = Some(r);
        }
    }
    answer.expect("some segment holds the root")
}

pub fn fd_gradient(kernel: &KernelSpec, d: &[f64], x: &Array1<f64>, y: &Array1<f64>, h: f64) -> Vec<f64> {
    (0..d.len())
        .map(|t| {
            let mut up = d.to_vec();
            let mut dn = d.to_vec();
            up[t] += h;
            dn[t] -= h;
            let fu = eval_weighted(kernel, &WeightVector::new(up).unwrap(), x.view(), y.view()).unwrap();
            let fl = eval_weighted(kernel, &WeightVector::new(dn).unwrap(), x.view(), y.view()).unwrap();
            (fu - fl) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
