//! # gpset
//!
//! Learns one acceptance region per class for set-valued multiclass
//! classification, with anomaly detection folded in: a point whose
//! prediction set is empty is flagged as an outlier.
//!
//! Each class region comes from a kernel margin problem that contrasts the
//! labeled class sample against an unlabeled sample of the test distribution,
//! under a cap on the class-specific non-coverage rate `gamma`. Two training
//! routes are provided:
//!
//! - [`gps`]: the dual quadratic program with the hinge loss.
//! - [`gpskfs`]: alternating optimization with a learned per-feature weight
//!   vector for kernel feature selection (Huberized hinge loss).
//!
//! Decision functions are thresholded by split-conformal calibration
//! ([`conformal`]), evaluated with [`metrics`], and compared against a
//! per-class one-class SVM baseline ([`ocsvm`]).
//!
//! ## Feature flags
//!
//! - `parallel` (default): per-class training, Gram assembly, replications
//!   and grid search run on a rayon pool. Without it every entry point runs
//!   sequentially; results are bit-identical either way.

pub mod conformal;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gps;
pub mod gpskfs;
pub mod kernel;
pub mod losses;
pub mod metrics;
pub mod model_io;
pub mod ocsvm;
pub mod par;
pub mod pipeline;
pub mod solver;

pub use conformal::{calibrate_threshold, fit_conformal, predict_set, FitOptions, SetValuedModel, SplitPlan};
pub use config::{Method, RunConfig};
pub use datagen::{Label, LabeledSet};
pub use error::{GpsError, Result};
pub use gps::{train_all_classes, train_gps, ClassTrainingInput, DecisionFunction};
pub use kernel::{KernelSpec, WeightVector};
pub use losses::LossSpec;
pub use metrics::{compute_metrics, EvalRecord, MetricsReport};
