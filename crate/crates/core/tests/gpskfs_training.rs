use gpset::datagen::{simulate, Example, SimSpec};
use gpset::gps::{train_gps, ClassTrainingInput};
use gpset::gpskfs::{
    constraint_value, fit_gpskfs, linearize, solve_alpha_rho, solve_d_step, KfsOptions, Layout, DESCENT_TOL,
};
use gpset::kernel::{gram, KernelSpec, WeightVector};
use gpset::losses::LossSpec;
use gpset::solver::{QpOptions, SmoothOptions};
use ndarray::{array, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss() -> LossSpec {
    LossSpec::huberized(0.1).unwrap()
}

fn matvec(k: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    k.dot(&ndarray::ArrayView1::from(x)).to_vec()
}

/// Largest `ρ` meeting the class constraint, by bisection.
fn oracle_rho(loss: &LossSpec, u: &[f64], n: usize, gamma: f64) -> f64 {
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if constraint_value(loss, u, mid, n) <= gamma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[test]
fn huberized_alpha_rho_agrees_with_gps_on_the_analytic_instance() {
    let train = array![[1.0], [1.0]];
    let test = array![[-1.0], [-1.0]];
    let input = ClassTrainingInput {
        train: train.view(),
        test: test.view(),
        gamma: 0.05,
        c: 1.0,
        kernel: KernelSpec::Linear,
        d: WeightVector::ones(1),
        theory: None,
    };
    let gps = train_gps(&input).unwrap();
    let points = array![[1.0], [1.0], [-1.0], [-1.0]];
    let k = gram(&KernelSpec::Linear, &WeightVector::ones(1), points.view(), points.view()).unwrap();
    let step = solve_alpha_rho(&k, Layout { n_train: 2, gamma: 0.05 }, 1.0, &loss(), &QpOptions::default()).unwrap();
    let kfs_score = |x: f64| step.alpha.iter().zip(points.column(0)).map(|(a, xi)| a * xi * x).sum::<f64>() - step.rho;
    for x in [1.0, -1.0] {
        let g = gps.score(ndarray::array![x].view()).unwrap();
        assert_eq!(g > 0.0, kfs_score(x) > 0.0, "x = {x}: gps {g}, huberized {}", kfs_score(x));
    }
    assert!(kfs_score(1.0) > 0.0 && kfs_score(-1.0) < 0.0);
}

#[test]
fn alpha_rho_without_test_term_matches_grid_search() {
    let x = array![[0.0, 0.3], [0.8, -0.4], [0.2, 1.1]];
    let kernel = KernelSpec::gaussian(0.8).unwrap();
    let k = gram(&kernel, &WeightVector::ones(2), x.view(), x.view()).unwrap();
    let gamma = 0.2;
    let l = loss();
    // All three points are class rows; the layout needs one trailing test row
    // that does not enter when C1 = 0.
    let with_test = array![[0.0, 0.3], [0.8, -0.4], [0.2, 1.1], [3.0, 3.0]];
    let k4 = gram(&kernel, &WeightVector::ones(2), with_test.view(), with_test.view()).unwrap();
    let step = solve_alpha_rho(&k4, Layout { n_train: 3, gamma }, 0.0, &l, &QpOptions::default()).unwrap();
    assert!(step.alpha[3] == 0.0);
    assert!((step.constraint - gamma).abs() < 1e-6, "constraint {}", step.constraint);
    let objective = |alpha: &[f64]| -> f64 {
        let u = matvec(&k, alpha);
        let rho = oracle_rho(&l, &u, 3, gamma);
        0.5 * alpha.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() - rho
    };
    let ours = objective(&step.alpha[..3]);
    let mut best = f64::INFINITY;
    let steps = 80;
    for i in 0..=steps {
        for j in 0..=steps {
            for m in 0..=steps {
                let a = [
                    -0.5 + 2.0 * i as f64 / steps as f64,
                    -0.5 + 2.0 * j as f64 / steps as f64,
                    -0.5 + 2.0 * m as f64 / steps as f64,
                ];
                best = best.min(objective(&a));
            }
        }
    }
    assert!(ours <= best + 1e-6, "solver {ours} vs grid {best}");
    assert!(best <= ours + 1e-2, "grid {best} far above solver {ours}");
}

#[test]
fn alpha_rho_iterates_are_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..20 {
        let n = rng.random_range(2..15);
        let m = rng.random_range(2..15);
        let x = Array2::from_shape_fn((n + m, 3), |(i, _)| {
            if i < n {
                rng.random_range(-1.0..1.0)
            } else {
                rng.random_range(-3.0..3.0)
            }
        });
        let kernel = KernelSpec::gaussian(rng.random_range(0.5..2.0)).unwrap();
        let k = gram(&kernel, &WeightVector::ones(3), x.view(), x.view()).unwrap();
        let gamma = rng.random_range(0.01..0.4);
        let c1 = rng.random_range(0.0..3.0);
        let step = solve_alpha_rho(&k, Layout { n_train: n, gamma }, c1, &loss(), &QpOptions::default()).unwrap();
        assert!(step.constraint <= gamma + 1e-6, "case {case}: {} > {gamma}", step.constraint);
        let u = matvec(&k, &step.alpha);
        assert!((constraint_value(&loss(), &u, step.rho, n) - step.constraint).abs() < 1e-12);
    }
}

struct DCase {
    points: Array2<f64>,
    kernel: KernelSpec,
    alpha: Vec<f64>,
    rho: f64,
    layout: Layout,
}

fn d_case(start: &WeightVector) -> DCase {
    let points = array![[0.1, 0.9], [0.4, -0.2], [1.6, 1.2]];
    let kernel = KernelSpec::gaussian(1.0).unwrap();
    let layout = Layout { n_train: 2, gamma: 0.3 };
    let k = gram(&kernel, start, points.view(), points.view()).unwrap();
    let step = solve_alpha_rho(&k, layout, 1.0, &loss(), &QpOptions::default()).unwrap();
    DCase {
        points,
        kernel,
        alpha: step.alpha,
        rho: step.rho,
        layout,
    }
}

/// Surrogate objective and constraint of the d-step at `d`.
fn surrogate(
    lin: &gpset::gpskfs::LinearizationMatrices,
    case: &DCase,
    c1: f64,
    c2: f64,
    d: &[f64],
) -> (f64, f64) {
    let l = loss();
    let a_alpha = matvec(&lin.a, &case.alpha);
    let b_alpha = matvec(&lin.b, &case.alpha);
    let z = matvec(&lin.b.t().to_owned(), d);
    let n = case.layout.n_train;
    let mut f = 0.5 * b_alpha.iter().zip(d).map(|(r, x)| r * x).sum::<f64>() + c2 * d.iter().sum::<f64>();
    for j in n..a_alpha.len() {
        f += c1 * l.value(case.rho - a_alpha[j] - z[j]);
    }
    let g = (0..n).map(|i| l.value(a_alpha[i] + z[i] - case.rho)).sum::<f64>() / n as f64;
    (f, g)
}

fn tight_smooth() -> SmoothOptions {
    SmoothOptions {
        tol: 1e-9,
        max_iter: 5000,
        max_outer: 30,
        ..SmoothOptions::default()
    }
}

#[test]
fn d_step_matches_dense_grid_search() {
    let start = WeightVector::new(vec![0.5, 0.5]).unwrap();
    let case = d_case(&start);
    let lin = linearize(&case.kernel, &start, &case.alpha, case.points.view()).unwrap();
    let (c1, c2) = (1.0, 0.1);
    let step = solve_d_step(&lin, &case.alpha, case.rho, c1, c2, case.layout, &loss(), &start, &tight_smooth()).unwrap();
    assert!(!step.stalled);
    let d = step.d.as_slice();
    assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));

    let mut best = (f64::INFINITY, [0.0, 0.0]);
    for i in 0..=1000 {
        for j in 0..=1000 {
            let cand = [i as f64 * 1e-3, j as f64 * 1e-3];
            let (f, g) = surrogate(&lin, &case, c1, c2, &cand);
            if g <= case.layout.gamma && f < best.0 {
                best = (f, cand);
            }
        }
    }
    for t in 0..2 {
        assert!((d[t] - best.1[t]).abs() <= 2e-3, "coordinate {t}: solver {d:?} vs grid {:?}", best.1);
    }
    let (f, g) = surrogate(&lin, &case, c1, c2, d);
    assert!(g <= case.layout.gamma + 1e-6);
    assert!(f <= best.0 + 1e-6, "solver objective {f} vs grid {}", best.0);
    assert!(d.iter().all(|&v| v > 0.05 && v < 0.95), "optimum {d:?} should be interior");
}

#[test]
fn dominant_l1_penalty_zeroes_the_weights() {
    let start = WeightVector::ones(2);
    let case = d_case(&start);
    let lin = linearize(&case.kernel, &start, &case.alpha, case.points.view()).unwrap();
    let (c1, c2) = (1.0, 0.0);
    // Feasibility of d = 0 makes the answer the zero vector once C2 dwarfs the
    // linear cost and the test-loss slope.
    let (_, g0) = surrogate(&lin, &case, c1, c2, &[0.0, 0.0]);
    assert!(g0 <= case.layout.gamma, "d = 0 must be feasible for this instance");
    let b_alpha = matvec(&lin.b, &case.alpha);
    let slope: f64 = b_alpha.iter().map(|v| 0.5 * v.abs()).sum::<f64>()
        + lin.b.iter().map(|v| c1 * v.abs()).sum::<f64>();
    let step = solve_d_step(&lin, &case.alpha, case.rho, c1, 10.0 * slope, case.layout, &loss(), &start, &tight_smooth())
        .unwrap();
    assert_eq!(step.d.as_slice(), &[0.0, 0.0]);
}

fn example_input(example: Example, seed: u64, n: usize, m: usize) -> (Array2<f64>, Array2<f64>) {
    let sim = simulate(&SimSpec {
        example,
        n_per_class: n,
        n_outlier: 30,
        seed,
    })
    .unwrap();
    let train = sim.train.x.select(Axis(0), &sim.train.class_rows(0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = (0..m).map(|_| rng.random_range(0..sim.test.len())).collect();
    let test = sim.test.x.select(Axis(0), &rows);
    (train, test)
}

fn kfs_input<'a>(train: &'a Array2<f64>, test: &'a Array2<f64>, sigma: f64) -> ClassTrainingInput<'a> {
    ClassTrainingInput {
        train: train.view(),
        test: test.view(),
        gamma: 0.1,
        c: 1.0,
        kernel: KernelSpec::gaussian(sigma).unwrap(),
        d: WeightVector::ones(train.ncols()),
        theory: None,
    }
}

#[test]
fn noise_features_get_smaller_weights_on_example1() {
    for seed in 0..5 {
        let (train, test) = example_input(Example::One, seed, 60, 120);
        let fit = fit_gpskfs(&kfs_input(&train, &test, 1.0), &KfsOptions::new(1.0, 1.0)).unwrap();
        let d = fit.state.d.as_slice();
        let signal = (d[0] + d[1]) / 2.0;
        let noise = d[2..].iter().sum::<f64>() / 8.0;
        assert!(noise < signal, "seed {seed}: d = {d:?}");
        for w in fit.history.windows(2) {
            assert!(w[1] <= w[0] + DESCENT_TOL);
        }
    }
}

#[test]
fn unpenalized_single_feature_fit_matches_its_final_coefficient_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let train = Array2::from_shape_fn((12, 1), |_| rng.random_range(-1.0..1.0));
    let test = Array2::from_shape_fn((16, 1), |_| rng.random_range(-3.0..3.0));
    let opts = KfsOptions {
        tol: 1e-10,
        max_outer: 200,
        ..KfsOptions::new(1.0, 0.0)
    };
    let fit = fit_gpskfs(&kfs_input(&train, &test, 1.0), &opts).unwrap();
    assert!(fit.converged, "outer iterations {}", fit.outer_iterations);
    let points = ndarray::concatenate(Axis(0), &[train.view(), test.view()]).unwrap();
    let k = gram(&KernelSpec::gaussian(1.0).unwrap(), &fit.state.d, points.view(), points.view()).unwrap();
    let step = solve_alpha_rho(&k, Layout { n_train: 12, gamma: 0.1 }, 1.0, &loss(), &opts.qp).unwrap();
    let probe = Array2::from_shape_fn((50, 1), |(i, _)| -4.0 + 8.0 * i as f64 / 49.0);
    let kp = gram(&KernelSpec::gaussian(1.0).unwrap(), &fit.state.d, probe.view(), points.view()).unwrap();
    let expected: Vec<f64> = matvec(&kp, &step.alpha).iter().map(|v| v - step.rho).collect();
    let got = fit.function.scores(probe.view()).unwrap();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}
