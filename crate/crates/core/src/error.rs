use std::fmt;

use crate::solver::SolverReport;

pub type Result<T, E = GpsError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum GpsError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("degenerate bandwidth: all pairwise weighted distances are zero")]
    DegenerateBandwidth,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("solver failure: {msg} ({report})")]
    Solver { msg: String, report: SolverReport },

    #[error("training failed for classes {}", ClassList(.failures))]
    Training { failures: Vec<ClassFailure> },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One class that failed inside a multi-class training call.
#[derive(Debug, Clone)]
pub struct ClassFailure {
    pub class: usize,
    pub reason: String,
}

struct ClassList<'a>(&'a [ClassFailure]);

impl fmt::Display for ClassList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{} ({})", c.class, c.reason)?;
        }
        Ok(())
    }
}

impl GpsError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        GpsError::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        GpsError::Config(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        GpsError::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 is reserved for usage errors (raised by the CLI itself), 3 for data
    /// errors and 4 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            GpsError::Config(_) => 2,
            GpsError::Solver { .. } | GpsError::Training { .. } | GpsError::Internal(_) => 4,
            _ => 3,
        }
    }
}
