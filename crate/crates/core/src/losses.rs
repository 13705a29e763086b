//! Surrogate losses for the 0-1 indicator `1{u < 0}`.

use serde::{Deserialize, Serialize};

use crate::error::{GpsError, Result};

pub const DEFAULT_HUBER_DELTA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossSpec {
    /// `max(0, 1 - u)`
    Hinge,
    /// Huberized squared hinge: linear below `1 - delta`, quadratic on
    /// `(1 - delta, 1 + delta]`, zero beyond.
    Huberized { delta: f64 },
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::Huberized {
            delta: DEFAULT_HUBER_DELTA,
        }
    }
}

impl LossSpec {
    pub fn huberized(delta: f64) -> Result<Self> {
        let l = LossSpec::Huberized { delta };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Huberized { delta } if !(delta > 0.0 && delta < 1.0) => Err(
                GpsError::input(format!("huberized delta must lie in (0, 1), got {delta}")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn value(&self, u: f64) -> f64 {
        match *self {
            LossSpec::Hinge => (1.0 - u).max(0.0),
            LossSpec::Huberized { delta } => {
                if u <= 1.0 - delta {
                    1.0 - u
                } else if u <= 1.0 + delta {
                    let t = 1.0 - u + delta;
                    t * t / (4.0 * delta)
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative in `u`. For the hinge loss this returns the left
    /// subgradient (`-1` at the kink).
    #[inline]
    pub fn grad(&self, u: f64) -> f64 {
        match *self {
            LossSpec::Hinge => {
                if u <= 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossSpec::Huberized { delta } => {
                if u <= 1.0 - delta {
                    -1.0
                } else if u <= 1.0 + delta {
                    -(1.0 - u + delta) / (2.0 * delta)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(self, LossSpec::Huberized { .. })
    }
}

pub fn loss(spec: &LossSpec, u: f64) -> f64 {
    spec.value(u)
}

pub fn loss_grad(spec: &LossSpec, u: f64) -> f64 {
    spec.grad(u)
}
