//! Sequential minimal optimization with second-order working-set selection.
//!
//! Solves `min ½ aᵀQa + pᵀa` subject to `yᵀa = const` and `0 ≤ a ≤ u`,
//! with `y ∈ {-1, +1}` and `Q` dense symmetric PSD. The equality constant is
//! whatever the feasible starting point carries; every two-variable update
//! preserves it.

use ndarray::Array2;

const TAU: f64 = 1e-12;

pub struct SmoProblem<'a> {
    pub q: &'a Array2<f64>,
    pub p: &'a [f64],
    pub y: &'a [f64],
    pub upper: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct SmoOutcome {
    pub a: Vec<f64>,
    /// `Qa + p` at the returned point.
    pub grad: Vec<f64>,
    /// Multiplier of the equality constraint: `y_t G_t = b` on free indices.
    pub b: f64,
    /// Maximal KKT violation `m(a) - M(a)`; zero when no violating pair exists.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SmoOutcome {
    /// `½ aᵀQa + pᵀa`.
    pub fn objective(&self, p: &[f64]) -> f64 {
        0.5 * self
            .a
            .iter()
            .zip(self.grad.iter().zip(p))
            .map(|(a, (g, p))| a * (g + p))
            .sum::<f64>()
    }
}

impl SmoProblem<'_> {
    fn is_upper(&self, a: &[f64], t: usize) -> bool {
        a[t] >= self.upper[t]
    }

    fn is_lower(a: &[f64], t: usize) -> bool {
        a[t] <= 0.0
    }

    fn row(&self, i: usize) -> &[f64] {
        self.q.row(i).to_slice().expect("Q must be in standard layout")
    }

    pub fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let mut g = self.p.to_vec();
        for (j, &aj) in a.iter().enumerate() {
            if aj != 0.0 {
                for (gk, qk) in g.iter_mut().zip(self.row(j)) {
                    *gk += qk * aj;
                }
            }
        }
        g
    }

    /// Returns `(i, j)` or `None` when the gap is below `eps`, along with the gap.
    fn select(&self, a: &[f64], g: &[f64], eps: f64) -> (Option<(usize, usize)>, f64) {
        let n = a.len();
        let mut gmax = f64::NEG_INFINITY;
        let mut gmax_idx = usize::MAX;
        for t in 0..n {
            if self.y[t] > 0.0 {
                if !self.is_upper(a, t) && -g[t] >= gmax {
                    gmax = -g[t];
                    gmax_idx = t;
                }
            } else if !Self::is_lower(a, t) && g[t] >= gmax {
                gmax = g[t];
                gmax_idx = t;
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut gmin_idx = usize::MAX;
        let mut obj_min = f64::INFINITY;
        let (qi, qii, yi) = if gmax_idx != usize::MAX {
            (Some(self.row(gmax_idx)), self.q[[gmax_idx, gmax_idx]], self.y[gmax_idx])
        } else {
            (None, 0.0, 0.0)
        };
        for j in 0..n {
            if self.y[j] > 0.0 {
                if !Self::is_lower(a, j) {
                    if g[j] >= gmax2 {
                        gmax2 = g[j];
                    }
                    let diff = gmax + g[j];
                    if let (Some(qi), true) = (qi, diff > 0.0) {
                        let quad = qii + self.q[[j, j]] - 2.0 * yi * qi[j];
                        let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                        if obj <= obj_min {
                            gmin_idx = j;
                            obj_min = obj;
                        }
                    }
                }
            } else if !self.is_upper(a, j) {
                if -g[j] >= gmax2 {
                    gmax2 = -g[j];
                }
                let diff = gmax - g[j];
                if let (Some(qi), true) = (qi, diff > 0.0) {
                    let quad = qii + self.q[[j, j]] + 2.0 * yi * qi[j];
                    let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                    if obj <= obj_min {
                        gmin_idx = j;
                        obj_min = obj;
                    }
                }
            }
        }
        let gap = if gmax.is_finite() && gmax2.is_finite() {
            (gmax + gmax2).max(0.0)
        } else {
            0.0
        };
        if gap < eps || gmin_idx == usize::MAX || gmax_idx == usize::MAX {
            (None, gap)
        } else {
            (Some((gmax_idx, gmin_idx)), gap)
        }
    }

    fn update(&self, a: &mut [f64], g: &mut [f64], i: usize, j: usize) {
        let (ci, cj) = (self.upper[i], self.upper[j]);
        let qi = self.row(i);
        let qj = self.row(j);
        let old_i = a[i];
        let old_j = a[j];
        let (mut ai, mut aj) = (old_i, old_j);
        if self.y[i] != self.y[j] {
            let mut quad = self.q[[i, i]] + self.q[[j, j]] + 2.0 * qi[j];
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-g[i] - g[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > ci - cj {
                if ai > ci {
                    ai = ci;
                    aj = ci - diff;
                }
            } else if aj > cj {
                aj = cj;
                ai = cj + diff;
            }
        } else {
            let mut quad = self.q[[i, i]] + self.q[[j, j]] - 2.0 * qi[j];
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (g[i] - g[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > ci {
                if ai > ci {
                    ai = ci;
                    aj = sum - ci;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > cj {
                if aj > cj {
                    aj = cj;
                    ai = sum - cj;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        a[i] = ai;
        a[j] = aj;
        let di = ai - old_i;
        let dj = aj - old_j;
        for ((gk, qik), qjk) in g.iter_mut().zip(qi).zip(qj) {
            *gk += qik * di + qjk * dj;
        }
    }

    fn equality_multiplier(&self, a: &[f64], g: &[f64]) -> f64 {
        let mut ub = f64::INFINITY;
        let mut lb = f64::NEG_INFINITY;
        let mut sum_free = 0.0;
        let mut nr_free = 0usize;
        for t in 0..a.len() {
            let yg = self.y[t] * g[t];
            if self.is_upper(a, t) {
                if self.y[t] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if Self::is_lower(a, t) {
                if self.y[t] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                nr_free += 1;
                sum_free += yg;
            }
        }
        if nr_free > 0 {
            sum_free / nr_free as f64
        } else if ub.is_finite() && lb.is_finite() {
            0.5 * (ub + lb)
        } else if ub.is_finite() {
            ub
        } else {
            lb
        }
    }

    /// Run SMO from the feasible point `a0`.
    pub fn solve(&self, a0: Vec<f64>, eps: f64, max_iter: usize) -> SmoOutcome {
        let mut a = a0;
        let mut g = self.gradient(&a);
        let mut iterations = 0;
        let mut gap;
        loop {
            let (pair, current_gap) = self.select(&a, &g, eps);
            gap = current_gap;
            let Some((i, j)) = pair else { break };
            if iterations >= max_iter {
                break;
            }
            self.update(&mut a, &mut g, i, j);
            iterations += 1;
        }
        let b = self.equality_multiplier(&a, &g);
        SmoOutcome {
            converged: gap < eps,
            a,
            grad: g,
            b,
            gap,
            iterations,
        }
    }
}
