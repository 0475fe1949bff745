//! Shared error type for summary-data construction, estimation, and inference.

use thiserror::Error;

/// Errors raised by the library. Variants are grouped into input problems
/// (malformed files, mismatched tables) and numerical failures (singular or
/// indefinite matrices, optimizer breakdown); [`Error::is_input_error`]
/// exposes the split for exit-code mapping.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("variant mismatch in {table}: missing {}", missing.join(", "))]
    VariantMismatch { table: String, missing: Vec<String> },
    #[error("nonpositive standard error for variant {variant} in {table}")]
    NonPositiveSe { table: String, variant: String },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("unharmonizable variant {variant}: alleles {exposure} vs {outcome}")]
    Unharmonizable {
        variant: String,
        exposure: String,
        outcome: String,
    },
    #[error("strand-ambiguous variant {variant} ({alleles}); pass --allow-ambiguous to keep it")]
    AmbiguousVariant { variant: String, alleles: String },
    #[error("ill-conditioned LD matrix: condition number {cond:.3e} exceeds {limit:.1e}")]
    IllConditionedLd { cond: f64, limit: f64 },
    #[error("invalid covariance: {0} not positive definite after ridge repair")]
    InvalidCovariance(String),
    #[error("Omega not PD at theta = {theta:?}")]
    OmegaNotPd { theta: Vec<f64> },
    #[error("collinear exposures: weighted design matrix is rank deficient")]
    CollinearExposures,
    #[error("unidentified direction: D(theta) has rank {rank} < {cols}")]
    UnidentifiedDirection { rank: usize, cols: usize },
    #[error("optimizer failed: {0}")]
    OptimFailed(String),
    #[error("all candidate instrument subsets failed to build: {0}")]
    AllSubsetsFailed(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// True for errors caused by user inputs rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::VariantMismatch { .. }
                | Error::NonPositiveSe { .. }
                | Error::Dimension(_)
                | Error::Unharmonizable { .. }
                | Error::AmbiguousVariant { .. }
                | Error::InvalidConfig(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
