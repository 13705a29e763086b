//! Run configuration: method choice, γ, seeds, hyperparameter grids,
//! parallelism and file paths, stored as flat TOML.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GpsError, Result};
use crate::gps::TheoryParams;
use crate::kernel::DEFAULT_BANDWIDTH_PERCENTILES;
use crate::losses::DEFAULT_HUBER_DELTA;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gps,
    Gpskfs,
    Ocsvm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gps, Method::Gpskfs, Method::Ocsvm];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gps => "gps",
            Method::Gpskfs => "gpskfs",
            Method::Ocsvm => "ocsvm",
        }
    }

    /// Whether training consumes the unlabeled test subset.
    pub fn uses_test_subset(self) -> bool {
        !matches!(self, Method::Ocsvm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = GpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gps" => Ok(Method::Gps),
            "gpskfs" => Ok(Method::Gpskfs),
            "ocsvm" => Ok(Method::Ocsvm),
            other => Err(GpsError::config(format!(
                "unknown method `{other}` (expected gps, gpskfs or ocsvm)"
            ))),
        }
    }
}

fn log_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| 10f64.powf(lo + step * i as f64)).collect()
}

pub fn default_c_grid() -> Vec<f64> {
    log_grid(-2.0, 2.0, 0.5)
}

pub fn default_c1_grid() -> Vec<f64> {
    vec![1.0, 2.0, 3.0]
}

pub fn default_c2_grid() -> Vec<f64> {
    log_grid(-1.0, 1.0, 0.25)
}

pub fn default_gammas() -> Vec<f64> {
    vec![0.01, 0.02, 0.05, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub gamma: f64,
    /// γ grid for sweeps, ascending.
    pub gammas: Vec<f64>,
    pub seed: u64,
    pub replications: usize,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Cap on the size of the unlabeled test subset used in training.
    pub m_max: usize,
    /// Fraction of each class sample used for training; the rest calibrates.
    pub train_fraction: f64,
    pub c_grid: Vec<f64>,
    pub c1_grid: Vec<f64>,
    pub c2_grid: Vec<f64>,
    pub sigma_percentiles: Vec<f64>,
    pub huber_delta: f64,
    pub gamma_adjust: bool,
    pub theory_s: f64,
    pub theory_zeta: f64,
    pub kfs_max_outer: usize,
    pub kfs_max_inner: usize,
    pub kfs_tol: f64,
    pub label_column: String,
    pub outlier_token: String,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Gps,
            gamma: 0.05,
            gammas: default_gammas(),
            seed: 0,
            replications: 20,
            jobs: 0,
            m_max: 500,
            train_fraction: 0.5,
            c_grid: default_c_grid(),
            c1_grid: default_c1_grid(),
            c2_grid: default_c2_grid(),
            sigma_percentiles: DEFAULT_BANDWIDTH_PERCENTILES.to_vec(),
            huber_delta: DEFAULT_HUBER_DELTA,
            gamma_adjust: false,
            theory_s: 1.0,
            theory_zeta: 0.05,
            kfs_max_outer: 50,
            kfs_max_inner: 20,
            kfs_tol: 1e-4,
            label_column: "label".into(),
            outlier_token: "Outlier".into(),
            train: None,
            test: None,
            model: None,
            out: None,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(GpsError::config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

fn check_grid(name: &str, grid: &[f64], allow_zero: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(GpsError::config(format!("{name} must not be empty")));
    }
    for &v in grid {
        let ok = v.is_finite() && (v > 0.0 || (allow_zero && v == 0.0));
        if !ok {
            return Err(GpsError::config(format!("{name} contains invalid value {v}")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| GpsError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check_unit("gamma", self.gamma)?;
        if self.gammas.is_empty() {
            return Err(GpsError::config("gammas must not be empty"));
        }
        for &g in &self.gammas {
            check_unit("gammas entry", g)?;
        }
        if self.gammas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GpsError::config("gammas must be strictly ascending"));
        }
        check_unit("train_fraction", self.train_fraction)?;
        check_grid("c_grid", &self.c_grid, false)?;
        check_grid("c1_grid", &self.c1_grid, true)?;
        check_grid("c2_grid", &self.c2_grid, true)?;
        if self.sigma_percentiles.is_empty()
            || self.sigma_percentiles.iter().any(|q| !(0.0..=100.0).contains(q))
        {
            return Err(GpsError::config("sigma_percentiles must be nonempty values in [0, 100]"));
        }
        check_unit("huber_delta", self.huber_delta)?;
        check_unit("theory_zeta", self.theory_zeta)?;
        if self.theory_s < 0.0 {
            return Err(GpsError::config("theory_s must be nonnegative"));
        }
        if self.m_max < 2 {
            return Err(GpsError::config("m_max must be at least 2"));
        }
        if self.replications == 0 {
            return Err(GpsError::config("replications must be at least 1"));
        }
        if self.kfs_max_outer == 0 || self.kfs_max_inner == 0 || self.kfs_tol.is_nan() || self.kfs_tol <= 0.0 {
            return Err(GpsError::config("feature-selection loop limits must be positive"));
        }
        if self.outlier_token.is_empty() || self.label_column.is_empty() {
            return Err(GpsError::config("label_column and outlier_token must be nonempty"));
        }
        Ok(())
    }

    pub fn theory(&self) -> Option<TheoryParams> {
        self.gamma_adjust.then(|| TheoryParams {
            s: self.theory_s,
            zeta: self.theory_zeta,
            ..TheoryParams::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        let c = default_c_grid();
        assert_eq!(c.len(), 9);
        assert!((c[0] - 0.01).abs() < 1e-15 && (c[8] - 100.0).abs() < 1e-12);
        assert!((c[4] - 1.0).abs() < 1e-15);
        let c2 = default_c2_grid();
        assert_eq!(c2.len(), 9);
        assert!((c2[0] - 0.1).abs() < 1e-15 && (c2[8] - 10.0).abs() < 1e-12);
        assert_eq!(default_c1_grid(), vec![1.0, 2.0, 3.0]);
        assert_eq!(RunConfig::default().sigma_percentiles, vec![25.0, 37.5, 50.0, 62.5, 75.0]);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            method: Method::Gpskfs,
            train: Some("a/train.csv".into()),
            ..RunConfig::default()
        };
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = RunConfig::from_toml_str("gamma = 0.01\nc_grid = [1.0]\n").unwrap();
        assert_eq!(cfg.gamma, 0.01);
        assert_eq!(cfg.c_grid, vec![1.0]);
        assert_eq!(cfg.replications, 20);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["gamma = 1.0", "c_grid = []", "unknown = 3", "gammas = [0.1, 0.05]"] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("GPSKFS".parse::<Method>().unwrap(), Method::Gpskfs);
        assert!("svm".parse::<Method>().is_err());
    }
}
