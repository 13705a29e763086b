mod common;

use common::{breakpoint_scan, dual_value, grid_minimum, random_problem};
use gpset::solver::{recover_rho, rho_constraint, solve_dual_qp, QpOptions, QpProblem};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check_feasible(p: &QpProblem, alpha: &[f64], beta: &[f64], theta: f64) {
    let tol = 1e-8;
    assert!(theta >= 0.0);
    assert!(alpha.iter().all(|&a| a >= -tol && a <= theta + tol));
    assert!(beta.iter().all(|&b| b >= -tol && b <= p.c + tol));
    let eq = alpha.iter().sum::<f64>() - beta.iter().sum::<f64>();
    assert!((eq - 1.0).abs() < 1e-8, "equality residual {}", eq - 1.0);
}

#[test]
fn dual_qp_is_no_worse_than_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shapes: Vec<(usize, usize)> = (1..=3).flat_map(|n| (1..=3).map(move |m| (n, m))).collect();
    for case in 0..50 {
        let (n, m) = shapes[case % shapes.len()];
        let problem = random_problem(&mut rng, n, m);
        let (sol, report) = solve_dual_qp(&problem, &QpOptions::default()).unwrap();
        assert!(report.is_converged(), "case {case}: {report}");
        check_feasible(&problem, &sol.alpha, &sol.beta, sol.theta);
        let v: Vec<f64> = sol.alpha.iter().chain(&sol.beta).copied().collect();
        let ours = dual_value(&problem, &v, sol.theta);
        assert!((ours - sol.objective).abs() < 1e-9, "reported objective differs");
        let grid = grid_minimum(&problem, 9, 25);
        assert!(ours <= grid + 1e-4, "case {case} ({n}+{m}): solver {ours} vs grid {grid}");
        assert!(grid >= ours - 1e-6, "case {case}: grid point below the solver optimum");
    }
}

#[test]
fn huberized_dual_is_no_worse_than_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..20 {
        let n = 1 + case % 3;
        let m = 1 + (case / 3) % 3;
        let problem = random_problem(&mut rng, n, m).huberized(0.1);
        let (sol, report) = solve_dual_qp(&problem, &QpOptions::default()).unwrap();
        assert!(report.is_converged(), "case {case}: {report}");
        check_feasible(&problem, &sol.alpha, &sol.beta, sol.theta);
        let v: Vec<f64> = sol.alpha.iter().chain(&sol.beta).copied().collect();
        let ours = dual_value(&problem, &v, sol.theta);
        let grid = grid_minimum(&problem, 9, 25);
        assert!(ours <= grid + 1e-4, "case {case} ({n}+{m}): solver {ours} vs grid {grid}");
        assert!(grid >= ours - 1e-6, "case {case}: grid point below the solver optimum");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn recover_rho_equals_breakpoint_scan(
        g in prop::collection::vec(-3.0f64..3.0, 1..12),
        gamma in 0.0f64..0.9,
        g_test in prop::collection::vec(-3.0f64..3.0, 0..4),
        c in 0.01f64..10.0,
    ) {
        let rho = recover_rho(&g, &g_test, c, gamma, g.len());
        prop_assert_eq!(rho, breakpoint_scan(&g, gamma));
        let budget = g.len() as f64 * gamma;
        prop_assert!(rho_constraint(&g, rho) <= budget + 1e-10);
        prop_assert!(rho_constraint(&g, rho + 1e-6) > budget);
    }

    #[test]
    fn recover_rho_with_tied_scores(value in -2.0f64..2.0, copies in 1usize..6, gamma in 0.0f64..0.9) {
        let g = vec![value; copies];
        let rho = recover_rho(&g, &[], 1.0, gamma, copies);
        prop_assert_eq!(rho, breakpoint_scan(&g, gamma));
        prop_assert!((rho - (value - 1.0 + gamma)).abs() < 1e-12);
    }
}
