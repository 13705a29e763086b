//! Labeled data sets: the two simulation designs, CSV ingestion and the
//! train/test subsampling protocol for real data.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GpsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    /// Zero-based class id.
    Class(usize),
    Outlier,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(k) => Some(k),
            Label::Outlier => None,
        }
    }

    pub fn is_outlier(self) -> bool {
        self == Label::Outlier
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Array2<f64>,
    pub labels: Vec<Label>,
    /// Class names indexed by class id.
    pub classes: Vec<String>,
    pub role: Role,
}

impl LabeledSet {
    pub fn new(x: Array2<f64>, labels: Vec<Label>, classes: Vec<String>, role: Role) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(GpsError::input(format!(
                "{} rows but {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        if let Some(k) = labels.iter().filter_map(|l| l.class()).find(|&k| k >= classes.len()) {
            return Err(GpsError::input(format!("class id {k} has no name")));
        }
        if role == Role::Train && labels.iter().any(|l| l.is_outlier()) {
            return Err(GpsError::input("training sets cannot contain outlier rows"));
        }
        Ok(LabeledSet { x, labels, classes, role })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Row indices of class `k`, ascending.
    pub fn class_rows(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == Label::Class(k)).collect()
    }

    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_outlier()).count()
    }

    pub fn select(&self, rows: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes.clone(),
            role: self.role,
        }
    }

    /// Map labels onto another class-name list (for example the training
    /// classes of a model). Names outside it are an error.
    pub fn align_classes(&self, classes: &[String]) -> Result<LabeledSet> {
        let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let labels = self
            .labels
            .iter()
            .map(|l| match l {
                Label::Outlier => Ok(Label::Outlier),
                Label::Class(k) => index
                    .get(self.classes[*k].as_str())
                    .map(|&j| Label::Class(j))
                    .ok_or_else(|| GpsError::input(format!("unknown class `{}`", self.classes[*k]))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledSet {
            x: self.x.clone(),
            labels,
            classes: classes.to_vec(),
            role: self.role,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Example {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSpec {
    pub example: Example,
    /// Rows per class in each of the training and test sets.
    pub n_per_class: usize,
    /// Outlier rows in the test set.
    pub n_outlier: usize,
    pub seed: u64,
}

impl SimSpec {
    fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 || self.n_outlier == 0 {
            return Err(GpsError::config("simulation counts must be at least 1"));
        }
        Ok(())
    }
}

pub const EX1_NOISE_SD: f64 = 0.1;
pub const EX1_NOISE_DIMS: usize = 8;
pub const EX2_NOISE_DIMS: usize = 98;

/// Axis-aligned rectangles `[x0, x1] × [y0, y1]` of the Example 1 outlier
/// mixture, sampled with equal weights.
pub const EX1_OUTLIER_RECTANGLES: [[f64; 4]; 4] = [
    [6.0, 8.0, -2.0, 2.0],
    [-8.0, -6.0, -2.0, 2.0],
    [-2.0, 2.0, 6.0, 8.0],
    [-2.0, 2.0, -8.0, -6.0],
];

pub const EX2_RADII: [(f64, f64); 3] = [(0.0, 5.0), (4.0, 9.0), (8.0, 13.0)];
pub const EX2_OUTLIER_RADIUS: (f64, f64) = (15.0, 20.0);

/// Parameters of one Example 1 class: `X = μ + S·Z`, `Z ~ N(0, I₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianClass {
    pub mean: [f64; 2],
    /// `Σ^{1/2} = diag(σ, σ) + ε` with the scalar `ε` added to every entry.
    pub sqrt_cov: [[f64; 2]; 2],
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub classes: Vec<GaussianClass>,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Independent generator per (set, column) pair.
fn stream(seed: u64, set: u64, column: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((set << 32) | column);
    rng
}

const SET_PARAMS: u64 = 0;
const SET_TRAIN: u64 = 1;
const SET_TEST: u64 = 2;

fn class_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| i.to_string()).collect()
}

fn labels_for(n_classes: usize, n_per_class: usize, n_outlier: usize) -> Vec<Label> {
    let mut labels: Vec<Label> = (0..n_classes)
        .flat_map(|k| std::iter::repeat_n(Label::Class(k), n_per_class))
        .collect();
    labels.extend(std::iter::repeat_n(Label::Outlier, n_outlier));
    labels
}

fn fill_noise(x: &mut Array2<f64>, seed: u64, set: u64, first: usize, sd: f64) {
    for col in first..x.ncols() {
        let mut rng = stream(seed, set, col as u64 + 1);
        for row in 0..x.nrows() {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[[row, col]] = sd * z;
        }
    }
}

pub fn example1_classes(seed: u64) -> Vec<GaussianClass> {
    let mut rng = stream(seed, SET_PARAMS, 0);
    (0..4)
        .map(|_| {
            let r = rng.random_range(0.0..6.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let sigma = rng.random_range(0.8..1.2);
            let eps = rng.random_range(-0.5..0.5);
            GaussianClass {
                mean: [r * theta.cos(), r * theta.sin()],
                sqrt_cov: [[sigma + eps, eps], [eps, sigma + eps]],
            }
        })
        .collect()
}

fn example1_set(classes: &[GaussianClass], spec: &SimSpec, set: u64, n_outlier: usize) -> Result<LabeledSet> {
    let labels = labels_for(classes.len(), spec.n_per_class, n_outlier);
    let n = labels.len();
    let mut x = Array2::zeros((n, 2 + EX1_NOISE_DIMS));
    let mut pick = stream(spec.seed, set, 0);
    let mut s1 = stream(spec.seed, set, 1);
    let mut s2 = stream(spec.seed, set, 2);
    for (row, label) in labels.iter().enumerate() {
        match *label {
            Label::Class(k) => {
                let c = &classes[k];
                let z1: f64 = StandardNormal.sample(&mut s1);
                let z2: f64 = StandardNormal.sample(&mut s2);
                x[[row, 0]] = c.mean[0] + c.sqrt_cov[0][0] * z1 + c.sqrt_cov[0][1] * z2;
                x[[row, 1]] = c.mean[1] + c.sqrt_cov[1][0] * z1 + c.sqrt_cov[1][1] * z2;
            }
            Label::Outlier => {
                let r = EX1_OUTLIER_RECTANGLES[pick.random_range(0..4)];
                x[[row, 0]] = s1.random_range(r[0]..r[1]);
                x[[row, 1]] = s2.random_range(r[2]..r[3]);
            }
        }
    }
    fill_noise(&mut x, spec.seed, set, 2, EX1_NOISE_SD);
    let role = if set == SET_TRAIN { Role::Train } else { Role::Test };
    LabeledSet::new(x, labels, class_names(classes.len()), role)
}

/// Four bivariate normal classes plus eight N(0, 0.1²) noise columns; the test
/// set adds outliers from the four-rectangle uniform mixture.
pub fn generate_example1(spec: &SimSpec) -> Result<Simulated> {
    spec.validate()?;
    let classes = example1_classes(spec.seed);
    let train = example1_set(&classes, spec, SET_TRAIN, 0)?;
    let test = example1_set(&classes, spec, SET_TEST, spec.n_outlier)?;
    Ok(Simulated { classes, train, test })
}

fn example2_set(spec: &SimSpec, set: u64, n_outlier: usize) -> Result<LabeledSet> {
    let labels = labels_for(EX2_RADII.len(), spec.n_per_class, n_outlier);
    let n = labels.len();
    let mut x = Array2::zeros((n, 2 + EX2_NOISE_DIMS));
    let mut angle = stream(spec.seed, set, 1);
    let mut radius = stream(spec.seed, set, 2);
    for (row, label) in labels.iter().enumerate() {
        let (lo, hi) = match *label {
            Label::Class(k) => EX2_RADII[k],
            Label::Outlier => EX2_OUTLIER_RADIUS,
        };
        let theta = angle.random_range(0.0..std::f64::consts::TAU);
        let r = radius.random_range(lo..hi);
        x[[row, 0]] = r * theta.cos();
        x[[row, 1]] = r * theta.sin();
    }
    fill_noise(&mut x, spec.seed, set, 2, 1.0);
    let role = if set == SET_TRAIN { Role::Train } else { Role::Test };
    LabeledSet::new(x, labels, class_names(EX2_RADII.len()), role)
}

/// Three concentric annuli plus 98 standard normal noise columns; test
/// outliers lie on the annulus of radius 15 to 20.
pub fn generate_example2(spec: &SimSpec) -> Result<Simulated> {
    spec.validate()?;
    Ok(Simulated {
        classes: Vec::new(),
        train: example2_set(spec, SET_TRAIN, 0)?,
        test: example2_set(spec, SET_TEST, spec.n_outlier)?,
    })
}

pub fn simulate(spec: &SimSpec) -> Result<Simulated> {
    match spec.example {
        Example::One => generate_example1(spec),
        Example::Two => generate_example2(spec),
    }
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub label_column: String,
    pub outlier_token: String,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            label_column: "label".into(),
            outlier_token: "Outlier".into(),
        }
    }
}

fn sorted_names(names: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut v: Vec<String> = names.into_iter().collect();
    v.sort();
    v.dedup();
    if v.iter().all(|s| s.parse::<f64>().is_ok()) {
        v.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    v
}

/// Read a headed, comma-separated file. Class ids follow numeric order when
/// every class name is a number and lexicographic order otherwise.
pub fn load_csv(path: &Path, opts: &CsvOptions, role: Role) -> Result<LabeledSet> {
    let file = std::fs::File::open(path)?;
    read_csv(file, opts, role)
}

pub fn read_csv<R: std::io::Read>(reader: R, opts: &CsvOptions, role: Role) -> Result<LabeledSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| GpsError::parse(1, e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(GpsError::parse(1, "empty file"));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == opts.label_column)
        .ok_or_else(|| GpsError::parse(1, format!("no `{}` column", opts.label_column)))?;
    let width = headers.len();
    let p = width - 1;
    let mut values = Vec::new();
    let mut raw = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| GpsError::parse(line, e.to_string()))?;
        if rec.len() != width {
            return Err(GpsError::parse(line, format!("expected {width} fields, found {}", rec.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            if j == label_idx {
                raw.push(field.trim().to_string());
            } else {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| GpsError::parse(line, format!("non-numeric feature `{field}` in column {}", j + 1)))?;
                if !v.is_finite() {
                    return Err(GpsError::parse(line, format!("non-finite feature in column {}", j + 1)));
                }
                values.push(v);
            }
        }
    }
    if raw.is_empty() {
        return Err(GpsError::parse(2, "no data rows"));
    }
    let classes = sorted_names(raw.iter().filter(|s| **s != opts.outlier_token).cloned());
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels: Vec<Label> = raw
        .iter()
        .map(|s| if *s == opts.outlier_token { Label::Outlier } else { Label::Class(index[s.as_str()]) })
        .collect();
    if role == Role::Train {
        if let Some(i) = labels.iter().position(|l| l.is_outlier()) {
            return Err(GpsError::parse(i + 2, "training data cannot contain outlier rows"));
        }
    }
    let x = Array2::from_shape_vec((raw.len(), p), values).expect("rectangular");
    LabeledSet::new(x, labels, classes, role)
}

fn write_csv<W: std::io::Write>(set: &LabeledSet, opts: &CsvOptions, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=set.dim()).map(|j| format!("x{j}")).collect();
    header.push(opts.label_column.clone());
    wtr.write_record(&header).map_err(std::io::Error::from)?;
    let mut rec = Vec::with_capacity(set.dim() + 1);
    for (row, label) in set.x.outer_iter().zip(&set.labels) {
        rec.clear();
        rec.extend(row.iter().map(|v| v.to_string()));
        rec.push(match label {
            Label::Class(k) => set.classes[*k].clone(),
            Label::Outlier => opts.outlier_token.clone(),
        });
        wtr.write_record(&rec).map_err(std::io::Error::from)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write the set atomically; floats use the shortest exact decimal form.
pub fn save_csv(set: &LabeledSet, path: &Path, opts: &CsvOptions) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(set, opts, &mut buf)?;
    crate::model_io::write_atomic(path, &buf)
}

/// Sample `sizes[name]` rows of each named class without replacement for
/// training. The remaining rows of those classes, plus every row of classes
/// missing from `sizes` (relabeled as outliers) and every outlier row, form
/// the test pool.
pub fn subsample_protocol(
    full: &LabeledSet,
    sizes: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<(LabeledSet, LabeledSet)> {
    let kept: Vec<String> = full.classes.iter().filter(|c| sizes.contains_key(*c)).cloned().collect();
    if let Some(name) = sizes.keys().find(|n| !full.classes.contains(n)) {
        return Err(GpsError::config(format!("unknown class `{name}` in subsample sizes")));
    }
    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut in_train = vec![false; full.len()];
    for (new_id, name) in kept.iter().enumerate() {
        let k = full.classes.iter().position(|c| c == name).expect("known");
        let rows = full.class_rows(k);
        let want = sizes[name];
        if want > rows.len() {
            return Err(GpsError::config(format!(
                "class `{name}` has {} rows, {want} requested",
                rows.len()
            )));
        }
        let mut rng = stream(seed, 3, new_id as u64);
        let mut picked: Vec<usize> = sample(&mut rng, rows.len(), want).into_iter().map(|i| rows[i]).collect();
        picked.sort_unstable();
        for &r in &picked {
            in_train[r] = true;
        }
        train_labels.extend(std::iter::repeat_n(Label::Class(new_id), picked.len()));
        train_rows.extend(picked);
    }
    let relabel = |l: Label| -> Label {
        match l {
            Label::Class(k) => kept
                .iter()
                .position(|c| *c == full.classes[k])
                .map_or(Label::Outlier, Label::Class),
            Label::Outlier => Label::Outlier,
        }
    };
    let test_rows: Vec<usize> = (0..full.len()).filter(|&i| !in_train[i]).collect();
    let test_labels = test_rows.iter().map(|&i| relabel(full.labels[i])).collect();
    let order: Vec<usize> = {
        let mut idx: Vec<usize> = (0..train_rows.len()).collect();
        idx.sort_by_key(|&i| train_rows[i]);
        idx
    };
    let train_rows_sorted: Vec<usize> = order.iter().map(|&i| train_rows[i]).collect();
    let train_labels_sorted: Vec<Label> = order.iter().map(|&i| train_labels[i]).collect();
    let train = LabeledSet::new(
        full.x.select(Axis(0), &train_rows_sorted),
        train_labels_sorted,
        kept.clone(),
        Role::Train,
    )?;
    let test = LabeledSet::new(full.x.select(Axis(0), &test_rows), test_labels, kept, Role::Test)?;
    Ok((train, test))
}
