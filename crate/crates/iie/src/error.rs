//! Error type shared by every module of the crate.

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum IieError {
    /// A probability fell below the positivity floor.
    #[error("positivity violated: {what} = {value:e} is outside [{floor:e}, 1 - {floor:e}]{}", row_suffix(*row))]
    Positivity {
        what: &'static str,
        value: f64,
        floor: f64,
        row: Option<usize>,
    },

    /// A conditional law does not sum to one.
    #[error("normalization violated: {what} sums to {sum}")]
    Normalization { what: &'static str, sum: f64 },

    /// The CATE used as a ratio denominator is too close to zero.
    #[error("ratio denominator |psi(x)| = {value:e} is below the floor {floor:e}{}", row_suffix(*row))]
    RatioDegenerate {
        value: f64,
        floor: f64,
        row: Option<usize>,
    },

    /// A design matrix could not be inverted.
    #[error("design matrix is rank deficient ({0})")]
    Rank(String),

    /// All covariate values coincide, so no smoother can be fit.
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    /// The outcome scale is incompatible with the sensitivity assumption.
    #[error("assumption {assumption} needs outcome regressions in [0, 1], got {value}")]
    Scale { assumption: &'static str, value: f64 },

    /// The sample is too small for the requested operation.
    #[error("sample too small: {0}")]
    TooSmall(String),

    /// Too many Monte-Carlo replications failed.
    #[error("{failed} of {total} replications failed, above the cap of {cap}")]
    FailureCap {
        failed: usize,
        total: usize,
        cap: usize,
    },

    /// Any other malformed argument.
    #[error("invalid input: {0}")]
    Invalid(String),
}

fn row_suffix(row: Option<usize>) -> String {
    row.map(|r| format!(" (row {r})")).unwrap_or_default()
}

impl IieError {
    /// Attach an observation index to positivity and ratio errors.
    pub fn at_row(self, i: usize) -> Self {
        match self {
            IieError::Positivity {
                what, value, floor, ..
            } => IieError::Positivity {
                what,
                value,
                floor,
                row: Some(i),
            },
            IieError::RatioDegenerate { value, floor, .. } => IieError::RatioDegenerate {
                value,
                floor,
                row: Some(i),
            },
            other => other,
        }
    }

    /// Stable machine-readable identifier, used by the CLI on stderr.
    pub fn id(&self) -> &'static str {
        match self {
            IieError::Positivity { .. } => "positivity",
            IieError::Normalization { .. } => "normalization",
            IieError::RatioDegenerate { .. } => "ratio-degenerate",
            IieError::Rank(_) => "rank",
            IieError::DegenerateDesign(_) => "degenerate-design",
            IieError::Scale { .. } => "scale",
            IieError::TooSmall(_) => "too-small",
            IieError::FailureCap { .. } => "failure-cap",
            IieError::Invalid(_) => "invalid",
        }
    }
}

pub type Result<T> = std::result::Result<T, IieError>;
