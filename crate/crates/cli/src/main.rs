use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gpset::config::{Method, RunConfig};
use gpset::conformal::{fit_conformal, FitOptions, SetValuedModel};
use gpset::datagen::{load_csv, save_csv, simulate, CsvOptions, Example, LabeledSet, Role, SimSpec};
use gpset::metrics::{compute_metrics, gamma_sweep, rows_from_summaries, summarize, write_table, EvalRecord, MetricsReport};
use gpset::model_io::{load_model, load_predictions, save_model, save_predictions, write_atomic};
use gpset::par::{self, Jobs};
use gpset::pipeline::{evaluate_predictions, scree};
use gpset::GpsError;
use ndarray::Array2;

const SEED_ENV: &str = "GPS_SEED";

#[derive(Parser, Debug)]
#[command(name = "gpset", version, about = "Set-valued classification with anomaly detection")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (0 = every core).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Base seed; takes precedence over GPS_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark and write train.csv and test.csv.
    Simulate(SimulateArgs),
    /// Fit a set-valued model and write the model file.
    Train(TrainArgs),
    /// Like `train`, and report the selected hyperparameters per class.
    Tune(TrainArgs),
    /// Predict sets for every row of a data file.
    Predict(PredictArgs),
    /// Join predictions with the truth and write the metrics table.
    Evaluate(EvaluateArgs),
    /// Metrics across a grid of non-coverage rates.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExampleArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

impl From<ExampleArg> for Example {
    fn from(e: ExampleArg) -> Self {
        match e {
            ExampleArg::One => Example::One,
            ExampleArg::Two => Example::Two,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    example: ExampleArg,
    #[arg(long, default_value_t = 500)]
    n_per_class: usize,
    #[arg(long, default_value_t = 500)]
    n_outlier: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Default)]
struct GridArgs {
    #[arg(long, value_delimiter = ',')]
    c_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    c1_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    c2_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sigma_percentiles: Option<Vec<f64>>,
    #[arg(long)]
    m_max: Option<usize>,
}

impl GridArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.c_grid {
            cfg.c_grid = v.clone();
        }
        if let Some(v) = &self.c1_grid {
            cfg.c1_grid = v.clone();
        }
        if let Some(v) = &self.c2_grid {
            cfg.c2_grid = v.clone();
        }
        if let Some(v) = &self.sigma_percentiles {
            cfg.sigma_percentiles = v.clone();
        }
        if let Some(v) = self.m_max {
            cfg.m_max = v;
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Labeled training file.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test file; its features form the unlabeled pool.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Predictions file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    predictions: PathBuf,
    /// Model that produced the predictions; its training subset rows are skipped.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Metrics table; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
    /// Refit at every γ instead of recalibrating one fitted model.
    #[arg(long)]
    retrain: bool,
    #[arg(long)]
    replications: Option<usize>,
    /// Simulate each replication instead of reading --train/--test.
    #[arg(long, value_enum)]
    example: Option<ExampleArg>,
    #[arg(long, default_value_t = 500)]
    n_per_class: usize,
    #[arg(long, default_value_t = 500)]
    n_outlier: usize,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "usage error: {}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<GpsError>() {
        Some(e) => e.exit_code() as u8,
        None => 3,
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Ok(text) = std::env::var(SEED_ENV) {
        cfg.seed = text
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV} must be a nonnegative integer, got `{text}`")))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, command: &Command) {
    match command {
        Command::Simulate(_) => {}
        Command::Train(a) | Command::Tune(a) => {
            if let Some(m) = a.method {
                cfg.method = m;
            }
            if let Some(g) = a.gamma {
                cfg.gamma = g;
            }
            if a.train.is_some() {
                cfg.train = a.train.clone();
            }
            if a.test.is_some() {
                cfg.test = a.test.clone();
            }
            if a.out_model.is_some() {
                cfg.model = a.out_model.clone();
            }
            a.grid.apply(cfg);
        }
        Command::Predict(a) => {
            if a.model.is_some() {
                cfg.model = a.model.clone();
            }
            if a.test.is_some() {
                cfg.test = a.test.clone();
            }
            if a.out.is_some() {
                cfg.out = a.out.clone();
            }
        }
        Command::Evaluate(a) => {
            if a.test.is_some() {
                cfg.test = a.test.clone();
            }
        }
        Command::Sweep(a) => {
            if let Some(g) = &a.gammas {
                cfg.gammas = g.clone();
            }
            if let Some(g) = a.gamma {
                cfg.gamma = g;
            }
            if let Some(m) = a.methods.as_ref().and_then(|m| m.first()) {
                cfg.method = *m;
            }
            if let Some(r) = a.replications {
                cfg.replications = r;
            }
            if a.train.is_some() {
                cfg.train = a.train.clone();
            }
            if a.test.is_some() {
                cfg.test = a.test.clone();
            }
            if a.out.is_some() {
                cfg.out = a.out.clone();
            }
            a.grid.apply(cfg);
        }
    }
}

fn csv_options(cfg: &RunConfig) -> CsvOptions {
    CsvOptions {
        label_column: cfg.label_column.clone(),
        outlier_token: cfg.outlier_token.clone(),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn read_data(path: &Path, cfg: &RunConfig, role: Role) -> Result<LabeledSet> {
    load_csv(path, &csv_options(cfg), role).with_context(|| format!("reading {}", path.display()))
}

/// The training file and the unlabeled pool; the pool is empty when the
/// method needs none and no test file was given.
fn training_data(cfg: &RunConfig) -> Result<(LabeledSet, Option<LabeledSet>)> {
    let train = read_data(required(&cfg.train, "train")?, cfg, Role::Train)?;
    let test = match &cfg.test {
        Some(p) => Some(read_data(p, cfg, Role::Test)?),
        None if cfg.method.uses_test_subset() => {
            return Err(usage(format!(
                "--test is required for {}: training uses an unlabeled sample of the test data",
                cfg.method
            )))
        }
        None => None,
    };
    Ok((train, test))
}

fn fit(cfg: &RunConfig, train: &LabeledSet, test: Option<&LabeledSet>) -> Result<SetValuedModel> {
    let empty = Array2::<f64>::zeros((0, train.dim()));
    let pool = test.map_or(empty.view(), |t| t.x.view());
    Ok(fit_conformal(train, pool, cfg.method, &FitOptions::from_config(cfg))?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_simulate(cfg: &RunConfig, a: &SimulateArgs) -> Result<()> {
    let spec = SimSpec {
        example: a.example.into(),
        n_per_class: a.n_per_class,
        n_outlier: a.n_outlier,
        seed: cfg.seed,
    };
    let sim = simulate(&spec)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let opts = csv_options(cfg);
    save_csv(&sim.train, &a.out.join("train.csv"), &opts)?;
    save_csv(&sim.test, &a.out.join("test.csv"), &opts)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, report_hyper: bool) -> Result<()> {
    let model_path = required(&cfg.model, "out-model")?;
    let (train, test) = training_data(cfg)?;
    let model = fit(cfg, &train, test.as_ref())?;
    save_model(&model, model_path).with_context(|| format!("writing {}", model_path.display()))?;
    if report_hyper {
        let mut text = String::from("class,c,c1,c2,sigma_percentile,sigma,tau\n");
        let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for (name, m) in model.classes.iter().zip(&model.members) {
            text.push_str(&format!(
                "{name},{},{},{},{},{},{}\n",
                na(m.hyper.c),
                na(m.hyper.c1),
                na(m.hyper.c2),
                m.hyper.sigma_percentile,
                m.sigma,
                na(m.tau)
            ));
        }
        emit(None, &text)?;
    }
    Ok(())
}

fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let model_path = required(&cfg.model, "model")?;
    let out = required(&cfg.out, "out")?;
    let model = load_model(model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let test = read_data(required(&cfg.test, "test")?, cfg, Role::Test)?;
    let sets = model.predict(test.x.view())?;
    save_predictions(out, &sets, &model.classes).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn report_table(gamma: f64, method: Method, report: &MetricsReport, classes: &[String]) -> String {
    let summaries = summarize(std::slice::from_ref(report), classes);
    write_table(&rows_from_summaries(gamma, method, &summaries))
}

fn cmd_evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> Result<()> {
    let test = read_data(required(&cfg.test, "test")?, cfg, Role::Test)?;
    let table = match &a.model {
        Some(path) => {
            let model = load_model(path).with_context(|| format!("reading {}", path.display()))?;
            let sets = load_predictions(&a.predictions, &model.classes)
                .with_context(|| format!("reading {}", a.predictions.display()))?;
            let report = evaluate_predictions(&model, &test, &sets)?;
            report_table(model.gamma, model.method, &report, &model.classes)
        }
        None => {
            let sets = load_predictions(&a.predictions, &test.classes)
                .with_context(|| format!("reading {}", a.predictions.display()))?;
            if sets.len() != test.len() {
                return Err(GpsError::Input(format!("{} predictions for {} test rows", sets.len(), test.len())).into());
            }
            let records: Vec<EvalRecord> = test
                .labels
                .iter()
                .zip(sets)
                .map(|(&truth, predicted)| EvalRecord { truth, predicted })
                .collect();
            let report = compute_metrics(&records, test.n_classes())?;
            report_table(cfg.gamma, cfg.method, &report, &test.classes)
        }
    };
    emit(a.out.as_deref(), &table)
}

/// One replication: the data pair and the seed used for fitting.
fn replication_data(cfg: &RunConfig, a: &SweepArgs, r: usize) -> Result<(LabeledSet, Option<LabeledSet>, u64)> {
    let seed = cfg.seed.wrapping_add(r as u64);
    match a.example {
        Some(example) => {
            let sim = simulate(&SimSpec {
                example: example.into(),
                n_per_class: a.n_per_class,
                n_outlier: a.n_outlier,
                seed,
            })?;
            Ok((sim.train, Some(sim.test), seed))
        }
        None => {
            let train = read_data(required(&cfg.train, "train")?, cfg, Role::Train)?;
            let test = read_data(required(&cfg.test, "test")?, cfg, Role::Test)?;
            Ok((train, Some(test), seed))
        }
    }
}

/// Reports indexed by γ, for one method and one replication.
fn sweep_replication(cfg: &RunConfig, a: &SweepArgs, method: Method, r: usize) -> Result<Vec<Result<MetricsReport>>> {
    let (train, test, seed) = replication_data(cfg, a, r)?;
    let test = test.expect("sweeps always have a test set");
    let base = RunConfig {
        method,
        seed,
        jobs: 0,
        ..cfg.clone()
    };
    if a.retrain {
        return Ok(cfg
            .gammas
            .iter()
            .map(|&gamma| -> Result<MetricsReport> {
                let c = RunConfig { gamma, ..base.clone() };
                let model = fit(&c, &train, Some(&test))?;
                Ok(gpset::pipeline::evaluate(&model, &test)?)
            })
            .collect());
    }
    let model = fit(&base, &train, Some(&test))?;
    Ok(scree(&model, &test, &cfg.gammas)?.into_iter().map(Ok).collect())
}

fn cmd_sweep(cfg: &RunConfig, a: &SweepArgs) -> Result<bool> {
    let methods = a.methods.clone().unwrap_or_else(|| vec![cfg.method]);
    if methods.is_empty() {
        return Err(usage("--methods must not be empty"));
    }
    let replications = if a.example.is_some() { cfg.replications } else { a.replications.unwrap_or(1) };
    let mut per_method = Vec::with_capacity(methods.len());
    for &m in &methods {
        let runs = par::install(Jobs(cfg.jobs), || {
            par::map_range(Jobs::all(), replications, |r| sweep_replication(cfg, a, m, r))
        });
        per_method.push(runs);
    }
    let table = gamma_sweep(&cfg.gammas, &methods, |gamma, method| {
        let mi = methods.iter().position(|&m| m == method).expect("listed method");
        let gi = cfg.gammas.iter().position(|&g| g == gamma).expect("listed gamma");
        per_method[mi]
            .iter()
            .map(|run| match run {
                Ok(by_gamma) => by_gamma[gi].as_ref().cloned().map_err(|e| GpsError::Internal(format!("{e:#}"))),
                Err(e) => Err(GpsError::Internal(format!("{e:#}"))),
            })
            .collect()
    })?;
    emit(cfg.out.as_deref(), &write_table(&table.rows))?;
    for (gamma, method, msg) in &table.errors {
        eprintln!("gamma {gamma}, {method}: {msg}");
    }
    Ok(table.errors.is_empty())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let mut cfg = base_config(cli)?;
    if let Some(cmd) = &cli.command {
        apply_overrides(&mut cfg, cmd);
    }
    cfg.validate()?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    let Some(cmd) = &cli.command else {
        return Err(usage("a subcommand is required (see --help)"));
    };
    match cmd {
        Command::Simulate(a) => cmd_simulate(&cfg, a)?,
        Command::Train(_) => cmd_train(&cfg, false)?,
        Command::Tune(_) => cmd_train(&cfg, true)?,
        Command::Predict(_) => cmd_predict(&cfg)?,
        Command::Evaluate(a) => cmd_evaluate(&cfg, a)?,
        Command::Sweep(a) => {
            if !cmd_sweep(&cfg, a)? {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
