//! Offset recovery once `ŵ` is fixed.
//!
//! With `g_i = ŵᵀΦ(x_i)`, the primal reduces to
//!
//! ```text
//! min_ρ  −ρ + C Σ_j [1 + g_test_j − ρ]₊   s.t.  Σ_i [1 − g_train_i + ρ]₊ ≤ n_k γ
//! ```
//!
//! The objective has slope at most −1 everywhere and the constraint is
//! nondecreasing in `ρ`, so the minimizer is the largest feasible `ρ`: the
//! root of the piecewise-linear budget equation.

/// The objective of the offset problem.
pub fn rho_objective(g_test: &[f64], c: f64, rho: f64) -> f64 {
    -rho + c * g_test.iter().map(|g| (1.0 + g - rho).max(0.0)).sum::<f64>()
}

/// Left side of the hinge budget constraint.
pub fn rho_constraint(g_train: &[f64], rho: f64) -> f64 {
    g_train.iter().map(|g| (1.0 - g + rho).max(0.0)).sum()
}

/// Root of the budget equation for the active set `{i : g_i − 1 < ρ}` given
/// by `active`. Sums run in index order so the value is reproducible.
pub(crate) fn boundary_root(g_train: &[f64], active: impl Fn(usize) -> bool, budget: f64) -> f64 {
    let mut count = 0usize;
    let mut slack = 0.0;
    for (i, g) in g_train.iter().enumerate() {
        if active(i) {
            count += 1;
            slack += 1.0 - g;
        }
    }
    (budget - slack) / count as f64
}

/// Largest `ρ` satisfying the budget `Σ_i [1 − g_train_i + ρ]₊ ≤ n_k γ`.
///
/// `g_test` and `c` enter the objective only through terms with negative
/// slope in `ρ`, so they never move the minimizer; they are accepted to keep
/// the signature of the full problem.
pub fn recover_rho(g_train: &[f64], g_test: &[f64], c: f64, gamma: f64, n_k: usize) -> f64 {
    debug_assert!(c >= 0.0);
    let _ = g_test;
    assert!(!g_train.is_empty(), "offset recovery needs training scores");
    let budget = n_k as f64 * gamma.max(0.0);
    let mut bps: Vec<f64> = g_train.iter().map(|g| g - 1.0).collect();
    bps.sort_by(|a, b| a.total_cmp(b));
    // Find the segment [bps[k-1], bps[k]] that contains the root, k ≥ 1.
    let mut cum = 0.0;
    let mut k = 1;
    while k < bps.len() {
        cum += bps[k - 1];
        // Budget value at the next breakpoint with the first k points active.
        let at_next = k as f64 * bps[k] - cum;
        if at_next > budget {
            break;
        }
        k += 1;
    }
    let threshold = bps[k - 1];
    // Ties at the threshold are all active.
    boundary_root(g_train, |i| g_train[i] - 1.0 <= threshold, budget)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_plus_one_instance() {
        let rho = recover_rho(&[1.0], &[-1.0], 1.0, 0.05, 1);
        assert!((rho - 0.05).abs() < 1e-15);
        assert_eq!(recover_rho(&[1.0], &[-1.0], 1.0, 0.0, 1), 0.0);
    }

    #[test]
    fn budget_is_respected() {
        let g = [0.3, 1.7, -0.4, 2.2, 0.9];
        for gamma in [0.0, 0.01, 0.1, 0.5, 0.9] {
            let rho = recover_rho(&g, &[0.0], 1.0, gamma, g.len());
            let lhs = rho_constraint(&g, rho);
            assert!(lhs <= g.len() as f64 * gamma + 1e-10, "gamma {gamma}: {lhs}");
            // and it is tight
            assert!(lhs >= g.len() as f64 * gamma - 1e-10);
        }
    }

    #[test]
    fn ties_in_training_scores() {
        let g = [1.0, 1.0, 1.0];
        let rho = recover_rho(&g, &[], 2.0, 0.2, 3);
        assert!((rho - 0.2).abs() < 1e-15);
    }
}
