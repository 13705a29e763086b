//! Coverage, cardinality and detection metrics, replication summaries and
//! the γ-sweep table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::datagen::Label;
use crate::error::{GpsError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub truth: Label,
    /// Predicted class ids, ascending.
    pub predicted: Vec<usize>,
}

/// Metrics of one evaluation. Rates with an empty denominator are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub coverage: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    pub cardinality: f64,
    pub n_records: usize,
    pub conditional_cardinality: Option<f64>,
    pub n_normal: usize,
    pub detection_rate: Option<f64>,
    pub n_outliers: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(records: &[EvalRecord], n_classes: usize) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(GpsError::input("metrics need at least one record"));
    }
    let mut hits = vec![0usize; n_classes];
    let mut counts = vec![0usize; n_classes];
    let mut total = 0usize;
    let mut normal_total = 0usize;
    let mut n_normal = 0usize;
    let mut detected = 0usize;
    let mut n_outliers = 0usize;
    for r in records {
        if let Some(&k) = r.predicted.iter().find(|&&k| k >= n_classes) {
            return Err(GpsError::input(format!("predicted class {k} outside 0..{n_classes}")));
        }
        let size = r.predicted.len();
        total += size;
        match r.truth {
            Label::Class(k) => {
                if k >= n_classes {
                    return Err(GpsError::input(format!("true class {k} outside 0..{n_classes}")));
                }
                counts[k] += 1;
                if r.predicted.contains(&k) {
                    hits[k] += 1;
                }
                n_normal += 1;
                normal_total += size;
            }
            Label::Outlier => {
                n_outliers += 1;
                if size == 0 {
                    detected += 1;
                }
            }
        }
    }
    Ok(MetricsReport {
        coverage: hits.iter().zip(&counts).map(|(&h, &c)| ratio(h, c)).collect(),
        class_counts: counts,
        cardinality: total as f64 / records.len() as f64,
        n_records: records.len(),
        conditional_cardinality: ratio(normal_total, n_normal),
        n_normal,
        detection_rate: ratio(detected, n_outliers),
        n_outliers,
    })
}

/// Mean set size accumulated per true class, then recombined with the
/// outlier contribution.
pub fn cardinality_by_class(records: &[EvalRecord], n_classes: usize) -> f64 {
    let mut sums = vec![0.0; n_classes + 1];
    let mut counts = vec![0usize; n_classes + 1];
    for r in records {
        let g = r.truth.class().unwrap_or(n_classes);
        sums[g] += r.predicted.len() as f64;
        counts[g] += 1;
    }
    let mut acc = 0.0;
    for g in 0..=n_classes {
        if counts[g] > 0 {
            acc += counts[g] as f64 * (sums[g] / counts[g] as f64);
        }
    }
    acc / records.len() as f64
}

pub const METRIC_CARDINALITY: &str = "cardinality";
pub const METRIC_CONDITIONAL: &str = "conditional_cardinality";
pub const METRIC_DETECTION: &str = "detection_rate";

impl MetricsReport {
    /// `(name, value)` pairs in a fixed order: per-class coverage first.
    pub fn named_values(&self, classes: &[String]) -> Vec<(String, Option<f64>)> {
        let mut out: Vec<(String, Option<f64>)> = self
            .coverage
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let name = classes.get(k).cloned().unwrap_or_else(|| (k + 1).to_string());
                (format!("coverage_{name}"), *v)
            })
            .collect();
        out.push((METRIC_CARDINALITY.into(), Some(self.cardinality)));
        out.push((METRIC_CONDITIONAL.into(), self.conditional_cardinality));
        out.push((METRIC_DETECTION.into(), self.detection_rate));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    /// Sample standard deviation over `√R`; needs two defined values.
    pub se: Option<f64>,
    pub n: usize,
}

/// Mean and standard error over the defined values.
pub fn replicate(values: &[Option<f64>]) -> Summary {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    let n = v.len();
    if n == 0 {
        return Summary { mean: None, se: None, n };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let se = (n >= 2).then(|| {
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Summary { mean: Some(mean), se, n }
}

/// Per-metric summaries over replicated reports, in `named_values` order.
pub fn summarize(reports: &[MetricsReport], classes: &[String]) -> Vec<(String, Summary)> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    let names: Vec<String> = first.named_values(classes).into_iter().map(|(n, _)| n).collect();
    let columns: Vec<Vec<(String, Option<f64>)>> = reports.iter().map(|r| r.named_values(classes)).collect();
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let vals: Vec<Option<f64>> = columns.iter().map(|c| c[i].1).collect();
            (name.clone(), replicate(&vals))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub gamma: f64,
    pub method: Method,
    pub metric: String,
    pub value: Option<f64>,
    pub se: Option<f64>,
}

pub const TABLE_HEADER: &str = "gamma,method,metric,value,se";
pub const NA: &str = "NA";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

pub fn rows_from_summaries(gamma: f64, method: Method, summaries: &[(String, Summary)]) -> Vec<TableRow> {
    summaries
        .iter()
        .map(|(metric, s)| TableRow {
            gamma,
            method,
            metric: metric.clone(),
            value: s.mean,
            se: s.se,
        })
        .collect()
}

pub fn write_table(rows: &[TableRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.gamma, r.method, r.metric, fmt_opt(r.value), fmt_opt(r.se));
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub rows: Vec<TableRow>,
    /// Cells whose callback failed: `(γ, method, message)`.
    pub errors: Vec<(f64, Method, String)>,
}

/// Run `fit_eval(γ, method)` for every cell and tabulate the set-size and
/// detection metrics. Rows follow `gammas` order, then `methods` order.
pub fn gamma_sweep<F>(gammas: &[f64], methods: &[Method], mut fit_eval: F) -> Result<SweepTable>
where
    F: FnMut(f64, Method) -> Result<Vec<MetricsReport>>,
{
    if gammas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GpsError::config("gammas must be strictly ascending"));
    }
    let mut table = SweepTable::default();
    for &g in gammas {
        for &m in methods {
            match fit_eval(g, m) {
                Ok(reports) => {
                    let summaries: Vec<(String, Summary)> = summarize(&reports, &[])
                        .into_iter()
                        .filter(|(n, _)| !n.starts_with("coverage_"))
                        .collect();
                    table.rows.extend(rows_from_summaries(g, m, &summaries));
                }
                Err(e) => table.errors.push((g, m, e.to_string())),
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(truth: Label, p: &[usize]) -> EvalRecord {
        EvalRecord {
            truth,
            predicted: p.to_vec(),
        }
    }

    #[test]
    fn four_record_fixture() {
        let r = vec![
            rec(Label::Class(0), &[0]),
            rec(Label::Class(0), &[0, 1]),
            rec(Label::Outlier, &[]),
            rec(Label::Class(1), &[0]),
        ];
        let m = compute_metrics(&r, 2).unwrap();
        assert_eq!(m.coverage, vec![Some(1.0), Some(0.0)]);
        assert_eq!(m.cardinality, 1.0);
        assert!((m.conditional_cardinality.unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.detection_rate, Some(1.0));
    }

    #[test]
    fn full_sets_and_missing_outliers() {
        let r = vec![rec(Label::Class(0), &[0, 1, 2]), rec(Label::Outlier, &[0, 1, 2])];
        let m = compute_metrics(&r, 3).unwrap();
        assert_eq!(m.cardinality, 3.0);
        assert_eq!(m.detection_rate, Some(0.0));
        assert_eq!(m.coverage[1], None);
        let m = compute_metrics(&r[..1], 3).unwrap();
        assert_eq!(m.detection_rate, None);
        assert!(compute_metrics(&[], 3).is_err());
        assert!(compute_metrics(&[rec(Label::Class(0), &[5])], 3).is_err());
    }

    #[test]
    fn replication_summaries() {
        let s = replicate(&[Some(0.3), Some(0.3), Some(0.3)]);
        assert_eq!(s.se, Some(0.0));
        let s = replicate(&[Some(0.0), Some(1.0)]);
        assert_eq!(s.mean, Some(0.5));
        assert!((s.se.unwrap() - 0.5).abs() < 1e-15);
        let s = replicate(&[Some(0.4)]);
        assert_eq!((s.mean, s.se), (Some(0.4), None));
        let s = replicate(&[None, None]);
        assert_eq!(s.mean, None);
    }

    #[test]
    fn table_uses_na() {
        let rows = vec![TableRow {
            gamma: 0.05,
            method: Method::Gps,
            metric: METRIC_DETECTION.into(),
            value: None,
            se: None,
        }];
        assert_eq!(write_table(&rows), "gamma,method,metric,value,se\n0.05,gps,detection_rate,NA,NA\n");
    }

    #[test]
    fn sweep_continues_after_errors() {
        let t = gamma_sweep(&[0.01, 0.05], &[Method::Gps, Method::Ocsvm], |g, m| {
            if m == Method::Ocsvm && g > 0.02 {
                return Err(GpsError::input("boom"));
            }
            Ok(vec![compute_metrics(&[rec(Label::Class(0), &[0])], 1).unwrap()])
        })
        .unwrap();
        assert_eq!(t.rows.len(), 9);
        assert_eq!(t.errors.len(), 1);
        assert!(gamma_sweep(&[0.1, 0.01], &[Method::Gps], |_, _| Ok(vec![])).is_err());
    }

    fn arb_records() -> impl Strategy<Value = Vec<EvalRecord>> {
        prop::collection::vec(
            (0usize..4, prop::collection::btree_set(0usize..3, 0..=3)).prop_map(|(t, s)| EvalRecord {
                truth: if t == 3 { Label::Outlier } else { Label::Class(t) },
                predicted: s.into_iter().collect(),
            }),
            1..60,
        )
    }

    proptest! {
        #[test]
        fn two_route_cardinality(records in arb_records()) {
            let m = compute_metrics(&records, 3).unwrap();
            prop_assert!((m.cardinality - cardinality_by_class(&records, 3)).abs() < 1e-12);
            for c in m.coverage.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(c));
            }
            prop_assert!(m.cardinality <= 3.0);
        }

        #[test]
        fn conditional_matches_normal_subset(records in arb_records()) {
            let m = compute_metrics(&records, 3).unwrap();
            let normal: Vec<EvalRecord> = records.iter().filter(|r| !r.truth.is_outlier()).cloned().collect();
            match m.conditional_cardinality {
                Some(c) => {
                    let sub = compute_metrics(&normal, 3).unwrap();
                    prop_assert!((c - sub.cardinality).abs() < 1e-12);
                }
                None => prop_assert!(normal.is_empty()),
            }
        }
    }
}
