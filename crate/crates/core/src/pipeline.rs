//! End-to-end helpers: fit, evaluate on held-out test rows, replicate over
//! seeds, and sweep γ.

use ndarray::Axis;

use crate::conformal::{fit_conformal, FitOptions, SetValuedModel};
use crate::config::Method;
use crate::datagen::{simulate, LabeledSet, SimSpec};
use crate::error::{GpsError, Result};
use crate::metrics::{compute_metrics, EvalRecord, MetricsReport};
use crate::par::{self, Jobs};

/// Records for the rows of `test` that training did not consume.
pub fn eval_records(model: &SetValuedModel, test: &LabeledSet) -> Result<Vec<EvalRecord>> {
    let test = test.align_classes(&model.classes)?;
    let rows = model.held_out_rows(test.len());
    if rows.is_empty() {
        return Err(GpsError::input("no held-out test rows to evaluate"));
    }
    let x = test.x.select(Axis(0), &rows);
    let sets = model.predict(x.view())?;
    Ok(rows
        .iter()
        .zip(sets)
        .map(|(&i, predicted)| EvalRecord {
            truth: test.labels[i],
            predicted,
        })
        .collect())
}

pub fn evaluate(model: &SetValuedModel, test: &LabeledSet) -> Result<MetricsReport> {
    compute_metrics(&eval_records(model, test)?, model.n_classes())
}

/// Join predicted sets with the truth, skipping the training subset rows.
pub fn evaluate_predictions(model: &SetValuedModel, test: &LabeledSet, sets: &[Vec<usize>]) -> Result<MetricsReport> {
    if sets.len() != test.len() {
        return Err(GpsError::input(format!(
            "{} predictions for {} test rows",
            sets.len(),
            test.len()
        )));
    }
    let test = test.align_classes(&model.classes)?;
    let records: Vec<EvalRecord> = model
        .held_out_rows(test.len())
        .into_iter()
        .map(|i| EvalRecord {
            truth: test.labels[i],
            predicted: sets[i].clone(),
        })
        .collect();
    compute_metrics(&records, model.n_classes())
}

pub fn fit_and_evaluate(
    train: &LabeledSet,
    test: &LabeledSet,
    method: Method,
    opts: &FitOptions,
) -> Result<(SetValuedModel, MetricsReport)> {
    let model = fit_conformal(train, test.x.view(), method, opts)?;
    let report = evaluate(&model, test)?;
    Ok((model, report))
}

/// Metrics of a fixed trained model as thresholds are recalibrated across
/// `gammas`.
pub fn scree(model: &SetValuedModel, test: &LabeledSet, gammas: &[f64]) -> Result<Vec<MetricsReport>> {
    let test = test.align_classes(&model.classes)?;
    let rows = model.held_out_rows(test.len());
    let x = test.x.select(Axis(0), &rows);
    let scores = model.score_matrix(x.view())?;
    gammas
        .iter()
        .map(|&g| {
            let m = model.with_gamma(g)?;
            let sets = crate::conformal::sets_from_matrix(&scores, &m.thresholds());
            let records: Vec<EvalRecord> = rows
                .iter()
                .zip(sets)
                .map(|(&i, predicted)| EvalRecord {
                    truth: test.labels[i],
                    predicted,
                })
                .collect();
            compute_metrics(&records, m.n_classes())
        })
        .collect()
}

/// Replication `r` simulates with seed `base + r` and fits with the same seed.
pub fn simulate_replications(
    spec: &SimSpec,
    method: Method,
    opts: &FitOptions,
    replications: usize,
) -> Result<Vec<MetricsReport>> {
    let results = par::install(opts.jobs, || {
        par::map_range(Jobs::all(), replications, |r| -> Result<MetricsReport> {
            let seed = spec.seed.wrapping_add(r as u64);
            let sim = simulate(&SimSpec { seed, ..*spec })?;
            let fit = FitOptions {
                seed,
                jobs: Jobs::all(),
                ..opts.clone()
            };
            Ok(fit_and_evaluate(&sim.train, &sim.test, method, &fit)?.1)
        })
    });
    results.into_iter().collect()
}
