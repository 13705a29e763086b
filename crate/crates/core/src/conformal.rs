//! Split-conformal thresholds and the assembled set-valued classifier.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig};
use crate::datagen::LabeledSet;
use crate::error::{ClassFailure, GpsError, Result};
use crate::gps::{train_gps, ClassTrainingInput, DecisionFunction, TheoryParams};
use crate::gpskfs::{fit_gpskfs, KfsOptions};
use crate::kernel::{bandwidth_candidates, KernelSpec, WeightVector};
use crate::losses::LossSpec;
use crate::model_io::MODEL_FORMAT_VERSION;
use crate::ocsvm::{train_ocsvm, OcsvmConfig};
use crate::par::{self, Jobs};

/// `k*`-th smallest score with `k* = ⌊γ(n+1)⌋`; `−∞` when `k* < 1`.
pub fn calibrate_threshold(scores: &[f64], gamma: f64) -> f64 {
    assert!(!scores.is_empty(), "calibration needs at least one score");
    let k = (gamma * (scores.len() + 1) as f64).floor() as usize;
    if k < 1 {
        return f64::NEG_INFINITY;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s[k.min(s.len()) - 1]
}

/// `{k : score_k ≥ τ_k}`.
pub fn set_from_scores(scores: &[f64], taus: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .zip(taus)
        .enumerate()
        .filter(|(_, (s, t))| s >= t)
        .map(|(k, _)| k)
        .collect()
}

/// Per-class split of the labeled sample into training and calibration rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    /// Per class: training row indices into the labeled set.
    pub train: Vec<Vec<usize>>,
    /// Per class: calibration row indices into the labeled set.
    pub calibration: Vec<Vec<usize>>,
}

pub const MIN_CLASS_SIZE: usize = 4;

impl SplitPlan {
    /// Random split with a `train_fraction` share for training. Calibration
    /// gets at least `⌈1/γ⌉ − 1` rows whenever that leaves two for training.
    pub fn new(set: &LabeledSet, gamma: f64, train_fraction: f64, seed: u64) -> Result<Self> {
        let mut train = Vec::new();
        let mut calibration = Vec::new();
        for k in 0..set.n_classes() {
            let rows = set.class_rows(k);
            let n = rows.len();
            if n < MIN_CLASS_SIZE {
                return Err(GpsError::config(format!(
                    "class `{}` has {n} rows; at least {MIN_CLASS_SIZE} are required",
                    set.classes[k]
                )));
            }
            let wanted = (1.0 / gamma).ceil() as usize - 1;
            let mut n_cal = n - ((n as f64 * train_fraction).round() as usize).clamp(2, n - 2);
            if n_cal < wanted {
                n_cal = wanted.min(n - 2);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + k as u64);
            let perm = sample(&mut rng, n, n).into_vec();
            let mut cal: Vec<usize> = perm[..n_cal].iter().map(|&i| rows[i]).collect();
            let mut tr: Vec<usize> = perm[n_cal..].iter().map(|&i| rows[i]).collect();
            cal.sort_unstable();
            tr.sort_unstable();
            train.push(tr);
            calibration.push(cal);
        }
        Ok(SplitPlan { seed, train, calibration })
    }
}

/// Uniform sample without replacement of `min(m_max, ⌊pool/2⌋)` indices, sorted.
pub fn draw_test_subset(pool: usize, m_max: usize, seed: u64) -> Vec<usize> {
    let m = m_max.min(pool / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 40);
    let mut idx = sample(&mut rng, pool, m).into_vec();
    idx.sort_unstable();
    idx
}

/// Hyperparameters of one class model. Unused entries are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub c: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub sigma_index: usize,
    pub sigma_percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub c: Vec<f64>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub sigma_percentiles: Vec<f64>,
}

impl HyperGrid {
    /// Candidates in enumeration order; ties in tuning fall back to it.
    pub fn candidates(&self, method: Method) -> Vec<Hyper> {
        let mut out = Vec::new();
        for (sigma_index, &q) in self.sigma_percentiles.iter().enumerate() {
            let base = Hyper {
                c: None,
                c1: None,
                c2: None,
                sigma_index,
                sigma_percentile: q,
            };
            match method {
                Method::Gps => out.extend(self.c.iter().map(|&c| Hyper { c: Some(c), ..base })),
                Method::Gpskfs => {
                    for &c1 in &self.c1 {
                        out.extend(self.c2.iter().map(|&c2| Hyper {
                            c1: Some(c1),
                            c2: Some(c2),
                            ..base
                        }));
                    }
                }
                Method::Ocsvm => out.push(base),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KfsSettings {
    pub loss: LossSpec,
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol: f64,
}

impl Default for KfsSettings {
    fn default() -> Self {
        let o = KfsOptions::new(1.0, 1.0);
        KfsSettings {
            loss: o.loss,
            max_outer: o.max_outer,
            max_inner: o.max_inner,
            tol: o.tol,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub gamma: f64,
    pub seed: u64,
    pub m_max: usize,
    pub train_fraction: f64,
    pub grid: HyperGrid,
    pub jobs: Jobs,
    pub theory: Option<TheoryParams>,
    pub kfs: KfsSettings,
}

impl FitOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        FitOptions {
            gamma: cfg.gamma,
            seed: cfg.seed,
            m_max: cfg.m_max,
            train_fraction: cfg.train_fraction,
            grid: HyperGrid {
                c: cfg.c_grid.clone(),
                c1: cfg.c1_grid.clone(),
                c2: cfg.c2_grid.clone(),
                sigma_percentiles: cfg.sigma_percentiles.clone(),
            },
            jobs: Jobs(cfg.jobs),
            theory: cfg.theory(),
            kfs: KfsSettings {
                loss: LossSpec::Huberized { delta: cfg.huber_delta },
                max_outer: cfg.kfs_max_outer,
                max_inner: cfg.kfs_max_inner,
                tol: cfg.kfs_tol,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassModel {
    pub function: DecisionFunction,
    /// Acceptance threshold; `None` accepts every point.
    pub tau: Option<f64>,
    pub calibration_scores: Vec<f64>,
    pub hyper: Hyper,
    pub sigma: f64,
}

impl ClassModel {
    pub fn threshold(&self) -> f64 {
        self.tau.unwrap_or(f64::NEG_INFINITY)
    }
}

fn tau_option(t: f64) -> Option<f64> {
    t.is_finite().then_some(t)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetValuedModel {
    pub format_version: u32,
    pub method: Method,
    pub gamma: f64,
    pub seed: u64,
    pub dim: usize,
    pub classes: Vec<String>,
    pub members: Vec<ClassModel>,
    /// Test-pool rows consumed by training; evaluation skips them.
    pub test_subset: Vec<usize>,
    pub test_pool_size: usize,
}

impl SetValuedModel {
    pub fn n_classes(&self) -> usize {
        self.members.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() || self.members.len() != self.classes.len() {
            return Err(GpsError::input("model needs one member per class"));
        }
        for m in &self.members {
            if m.function.dim() != self.dim {
                return Err(GpsError::Dimension {
                    expected: self.dim,
                    got: m.function.dim(),
                });
            }
            m.function.kernel.validate()?;
        }
        Ok(())
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.members.iter().map(ClassModel::threshold).collect()
    }

    /// Scores per class, `K` vectors of length `points.nrows()`.
    pub fn score_matrix(&self, points: ArrayView2<f64>) -> Result<Vec<Vec<f64>>> {
        if points.ncols() != self.dim {
            return Err(GpsError::Dimension {
                expected: self.dim,
                got: points.ncols(),
            });
        }
        self.members.iter().map(|m| m.function.scores(points)).collect()
    }

    pub fn predict(&self, points: ArrayView2<f64>) -> Result<Vec<Vec<usize>>> {
        let scores = self.score_matrix(points)?;
        Ok(sets_from_matrix(&scores, &self.thresholds()))
    }

    /// Thresholds recomputed from the stored calibration scores at a new γ.
    pub fn with_gamma(&self, gamma: f64) -> Result<SetValuedModel> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(GpsError::input(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        let mut out = self.clone();
        out.gamma = gamma;
        for m in &mut out.members {
            m.tau = tau_option(calibrate_threshold(&m.calibration_scores, gamma));
        }
        Ok(out)
    }

    /// Rows of a test pool of size `n` not used in training.
    pub fn held_out_rows(&self, n: usize) -> Vec<usize> {
        if n != self.test_pool_size {
            return (0..n).collect();
        }
        let mut used = vec![false; n];
        for &i in &self.test_subset {
            used[i] = true;
        }
        (0..n).filter(|&i| !used[i]).collect()
    }
}

pub fn sets_from_matrix(scores: &[Vec<f64>], taus: &[f64]) -> Vec<Vec<usize>> {
    let n = scores.first().map_or(0, Vec::len);
    let mut row = vec![0.0; scores.len()];
    (0..n)
        .map(|j| {
            for (k, s) in scores.iter().enumerate() {
                row[k] = s[j];
            }
            set_from_scores(&row, taus)
        })
        .collect()
}

pub fn predict_set(model: &SetValuedModel, x: ArrayView1<f64>) -> Result<Vec<usize>> {
    let scores = model
        .members
        .iter()
        .map(|m| m.function.score(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(set_from_scores(&scores, &model.thresholds()))
}

/// Train one class model for a given hyperparameter choice.
#[allow(clippy::too_many_arguments)]
pub fn train_member(
    method: Method,
    hyper: &Hyper,
    sigma: f64,
    train: ArrayView2<f64>,
    test: ArrayView2<f64>,
    gamma: f64,
    theory: Option<TheoryParams>,
    kfs: &KfsSettings,
) -> Result<DecisionFunction> {
    let kernel = KernelSpec::gaussian(sigma)?;
    let input = |c: f64| ClassTrainingInput {
        train,
        test,
        gamma,
        c,
        kernel,
        d: WeightVector::ones(train.ncols()),
        theory,
    };
    match method {
        Method::Gps => train_gps(&input(hyper.c.ok_or_else(|| GpsError::config("missing C"))?)),
        Method::Gpskfs => {
            let c1 = hyper.c1.ok_or_else(|| GpsError::config("missing C1"))?;
            let c2 = hyper.c2.ok_or_else(|| GpsError::config("missing C2"))?;
            let opts = KfsOptions {
                loss: kfs.loss,
                max_outer: kfs.max_outer,
                max_inner: kfs.max_inner,
                tol: kfs.tol,
                ..KfsOptions::new(c1, c2)
            };
            let first = fit_gpskfs(&input(1.0), &opts)?;
            // Re-derive the bandwidth under the learned weights and refit from them.
            let d = first.function.weights.clone();
            let refit = bandwidth_candidates(train, &d, &[hyper.sigma_percentile])?[0];
            if refit.is_nan() || refit <= 0.0 {
                return Ok(first.function);
            }
            let second = ClassTrainingInput {
                kernel: KernelSpec::gaussian(refit)?,
                d,
                ..input(1.0)
            };
            Ok(fit_gpskfs(&second, &opts)?.function)
        }
        Method::Ocsvm => train_ocsvm(train, &OcsvmConfig { nu: gamma, kernel }),
    }
}

struct ClassData {
    train: Array2<f64>,
    calibration: Array2<f64>,
    sigmas: Vec<f64>,
}

fn better(a: (&Hyper, usize), b: (&Hyper, usize)) -> bool {
    if a.1 != b.1 {
        return a.1 < b.1;
    }
    let c2a = a.0.c2.unwrap_or(0.0);
    let c2b = b.0.c2.unwrap_or(0.0);
    if c2a != c2b {
        return c2a > c2b;
    }
    a.0.sigma_index < b.0.sigma_index
}

/// Split, train per class on the training part (with the shared test subset),
/// calibrate thresholds on the held-out part, and select hyperparameters
/// minimizing mean prediction-set size over all calibration rows.
pub fn fit_conformal(
    train: &LabeledSet,
    test_pool: ArrayView2<f64>,
    method: Method,
    opts: &FitOptions,
) -> Result<SetValuedModel> {
    let gamma = opts.gamma;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(GpsError::config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if train.n_classes() == 0 {
        return Err(GpsError::config("training data has no classes"));
    }
    if test_pool.ncols() != train.dim() {
        return Err(GpsError::Dimension {
            expected: train.dim(),
            got: test_pool.ncols(),
        });
    }
    let plan = SplitPlan::new(train, gamma, opts.train_fraction, opts.seed)?;
    let subset = draw_test_subset(test_pool.nrows(), opts.m_max, opts.seed);
    if method.uses_test_subset() && subset.len() < 2 {
        return Err(GpsError::config(format!(
            "test pool of {} rows is too small for a training subset",
            test_pool.nrows()
        )));
    }
    let test_sub = test_pool.select(Axis(0), &subset);
    let ones = WeightVector::ones(train.dim());
    let classes: Vec<ClassData> = (0..train.n_classes())
        .map(|k| -> Result<ClassData> {
            let tr = train.x.select(Axis(0), &plan.train[k]);
            let sigmas = bandwidth_candidates(tr.view(), &ones, &opts.grid.sigma_percentiles)?;
            Ok(ClassData {
                calibration: train.x.select(Axis(0), &plan.calibration[k]),
                train: tr,
                sigmas,
            })
        })
        .collect::<Result<_>>()?;
    let union = ndarray::concatenate(
        Axis(0),
        &classes.iter().map(|c| c.calibration.view()).collect::<Vec<_>>(),
    )
    .map_err(|e| GpsError::Internal(e.to_string()))?;
    let offsets: Vec<usize> = classes
        .iter()
        .scan(0, |acc, c| {
            let start = *acc;
            *acc += c.calibration.nrows();
            Some(start)
        })
        .collect();

    let candidates: Vec<Hyper> = opts
        .grid
        .candidates(method)
        .into_iter()
        .filter(|h| classes.iter().all(|c| c.sigmas[h.sigma_index] > 0.0))
        .collect();
    if candidates.is_empty() {
        return Err(GpsError::config("hyperparameter grid is empty"));
    }
    let n_classes = classes.len();
    let train_one = |h: &Hyper, k: usize| -> Result<DecisionFunction> {
        let c = &classes[k];
        train_member(
            method,
            h,
            c.sigmas[h.sigma_index],
            c.train.view(),
            test_sub.view(),
            gamma,
            opts.theory,
            &opts.kfs,
        )
    };

    let (best, functions) = par::install(opts.jobs, || -> Result<(usize, Option<Vec<DecisionFunction>>)> {
        if candidates.len() == 1 {
            let fs = collect_classes((0..n_classes).map(|k| train_one(&candidates[0], k)).collect::<Vec<_>>())?;
            return Ok((0, Some(fs)));
        }
        let jobs = candidates.len() * n_classes;
        let scored: Vec<Result<Vec<f64>>> = par::map_range(Jobs::all(), jobs, |job| {
            let (ci, k) = (job / n_classes, job % n_classes);
            train_one(&candidates[ci], k)?.scores(union.view())
        });
        let mut iter = scored.into_iter();
        // Total prediction-set size over the calibration union, per candidate.
        let mut results: Vec<Option<usize>> = Vec::with_capacity(candidates.len());
        let mut last_failures = Vec::new();
        for _ in 0..candidates.len() {
            let per_class: Vec<Result<Vec<f64>>> = iter.by_ref().take(n_classes).collect();
            match collect_classes(per_class) {
                Ok(union_scores) => {
                    let taus: Vec<f64> = (0..n_classes)
                        .map(|k| {
                            let start = offsets[k];
                            let own = &union_scores[k][start..start + classes[k].calibration.nrows()];
                            calibrate_threshold(own, gamma)
                        })
                        .collect();
                    let total = sets_from_matrix(&union_scores, &taus).iter().map(Vec::len).sum();
                    results.push(Some(total));
                }
                Err(e) => {
                    log::warn!("grid candidate skipped: {e}");
                    last_failures.push(e);
                    results.push(None);
                }
            }
        }
        let mut best: Option<usize> = None;
        for (i, r) in results.iter().enumerate() {
            let Some(total) = *r else { continue };
            let take = match best {
                None => true,
                Some(b) => better((&candidates[i], total), (&candidates[b], results[b].expect("kept"))),
            };
            if take {
                best = Some(i);
            }
        }
        match best {
            Some(b) => Ok((b, None)),
            None => Err(last_failures.pop().expect("every candidate failed")),
        }
    })?;
    let hyper = candidates[best];
    let functions = match functions {
        Some(f) => f,
        None => par::install(opts.jobs, || {
            collect_classes(par::map_range(Jobs::all(), n_classes, |k| train_one(&hyper, k)))
        })?,
    };

    let members = functions
        .into_iter()
        .zip(&classes)
        .map(|(function, c)| -> Result<ClassModel> {
            let calibration_scores = function.scores(c.calibration.view())?;
            let tau = tau_option(calibrate_threshold(&calibration_scores, gamma));
            let sigma = match function.kernel {
                KernelSpec::Gaussian { sigma } => sigma,
                KernelSpec::Linear => c.sigmas[hyper.sigma_index],
            };
            Ok(ClassModel {
                function,
                tau,
                calibration_scores,
                hyper,
                sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SetValuedModel {
        format_version: MODEL_FORMAT_VERSION,
        method,
        gamma,
        seed: opts.seed,
        dim: train.dim(),
        classes: train.classes.clone(),
        members,
        test_subset: subset,
        test_pool_size: test_pool.nrows(),
    })
}

fn collect_classes<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (class, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => out.push(v),
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

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn order_statistic_examples() {
        let s: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(calibrate_threshold(&s, 0.2), 0.2);
        assert_eq!(calibrate_threshold(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.1), f64::NEG_INFINITY);
        assert_eq!(calibrate_threshold(&[0.7; 9], 0.3), 0.7);
        assert_eq!(calibrate_threshold(&[0.9, 0.2, 0.5], 0.25), 0.2);
    }

    #[test]
    fn thresholds_are_monotone_in_gamma() {
        let s: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64).collect();
        let mut prev = f64::NEG_INFINITY;
        for g in [0.01, 0.02, 0.05, 0.1, 0.2, 0.5] {
            let t = calibrate_threshold(&s, g);
            assert!(t >= prev);
            prev = t;
        }
    }

    fn analytic_model() -> SetValuedModel {
        let f = DecisionFunction::new(
            KernelSpec::Linear,
            WeightVector::ones(1),
            array![[1.0]],
            vec![1.0],
            0.05,
        )
        .unwrap();
        let tau = calibrate_threshold(&[0.2, 0.5, 0.9], 0.25);
        SetValuedModel {
            format_version: MODEL_FORMAT_VERSION,
            method: Method::Gps,
            gamma: 0.25,
            seed: 0,
            dim: 1,
            classes: vec!["1".into()],
            members: vec![ClassModel {
                function: f,
                tau: Some(tau),
                calibration_scores: vec![0.2, 0.5, 0.9],
                hyper: Hyper {
                    c: Some(1.0),
                    c1: None,
                    c2: None,
                    sigma_index: 0,
                    sigma_percentile: 50.0,
                },
                sigma: 1.0,
            }],
            test_subset: vec![],
            test_pool_size: 0,
        }
    }

    #[test]
    fn analytic_prediction() {
        let m = analytic_model();
        assert_eq!(m.members[0].tau, Some(0.2));
        assert_eq!(predict_set(&m, array![0.5].view()).unwrap(), vec![0]);
        assert!(predict_set(&m, array![0.1].view()).unwrap().is_empty());
        assert!(predict_set(&m, array![0.1, 0.2].view()).is_err());
    }

    #[test]
    fn full_and_empty_sets() {
        assert_eq!(set_from_scores(&[1.0, 2.0, 3.0], &[0.0, 2.0, 3.0]), vec![0, 1, 2]);
        assert!(set_from_scores(&[1.0, 2.0], &[1.5, 2.5]).is_empty());
        assert_eq!(set_from_scores(&[-1.0], &[f64::NEG_INFINITY]), vec![0]);
    }

    #[test]
    fn tie_break_rules() {
        let h = |c2: Option<f64>, s: usize| Hyper {
            c: None,
            c1: None,
            c2,
            sigma_index: s,
            sigma_percentile: 0.0,
        };
        assert!(better((&h(None, 3), 10), (&h(None, 0), 11)));
        assert!(better((&h(Some(2.0), 3), 10), (&h(Some(1.0), 0), 10)));
        assert!(better((&h(Some(1.0), 0), 10), (&h(Some(1.0), 1), 10)));
        assert!(!better((&h(Some(1.0), 1), 10), (&h(Some(1.0), 1), 10)));
    }

    #[test]
    fn grid_enumeration() {
        let g = HyperGrid {
            c: vec![0.1, 1.0],
            c1: vec![1.0],
            c2: vec![0.5, 2.0],
            sigma_percentiles: vec![25.0, 50.0, 75.0],
        };
        assert_eq!(g.candidates(Method::Gps).len(), 6);
        assert_eq!(g.candidates(Method::Gpskfs).len(), 6);
        assert_eq!(g.candidates(Method::Ocsvm).len(), 3);
    }
}
