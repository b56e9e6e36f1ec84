// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for `{operand}`: expected {expected}, found {found}")]
    DimensionMismatch {
        operand: &'static str,
        expected: String,
        found: String,
    },

    #[error("reservoir state overflowed at step {step}; the dynamics diverged")]
    NonFinite { step: usize },

    #[error("realization {index}: {source}")]
    Realization {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate target: time average of y² is zero")]
    DegenerateTarget,

    #[error("matrix is not symmetric (relative deviation {deviation:.3e})")]
    Asymmetric { deviation: f64 },

    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue:.3e} vs scale {scale:.3e}")]
    NotPsd { eigenvalue: f64, scale: f64 },

    #[error("symmetric eigendecomposition did not converge")]
    NoConvergence,

    #[error("insufficient input history: need {required} samples, have {available}")]
    InsufficientHistory { required: usize, available: usize },

    #[error("basis has {size} targets, above the cap of {cap}; use smaller degree/delay cutoffs")]
    BasisTooLarge { size: u128, cap: usize },

    #[error("cannot separate signal from noise with a single realization")]
    CannotSeparate,

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn mismatch(
        operand: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            operand,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for config/IO problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } | Error::InvalidArgument(_) => 2,
            Error::BasisTooLarge { .. } => 2,
            Error::Stage { source, .. } | Error::Realization { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
