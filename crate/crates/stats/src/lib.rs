//! Analysis math for controller benchmarks: time-weighted memory upper
//! bounds, least-squares fits with prediction intervals, heap-scaling slopes,
//! and the report generator that ties them to on-disk run results.

mod bound;
mod ols;
pub mod report;
pub mod schema;
pub mod tdist;

use thiserror::Error;

pub use bound::{upper_bound, upper_bound_95};
pub use ols::{fit_linear, prediction_interval, slope_with_ci, BallastLevel, RegressionModel, SlopeEstimate};
pub use report::{report, write_report, ReportBundle, ReportError, SummaryRow};
pub use tdist::{student_t_cdf, student_t_quantile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("series is empty")]
    EmptySeries,
    #[error("timestamps must strictly increase (violated at sample {index})")]
    NonIncreasingTimestamps { index: usize },
    #[error("window ends before the last sample")]
    WindowEndsBeforeLastSample,
    #[error("percent must be in 1..=100, got {0}")]
    InvalidPercent(u32),
    #[error("need at least {needed} points, got {n}")]
    TooFewPoints { n: usize, needed: usize },
    #[error("all x values are identical")]
    DegenerateX,
    #[error("need at least two ballast levels, got {levels}")]
    TooFewLevels { levels: usize },
    #[error("ballast levels mix different operator counts")]
    MixedOperatorCounts,
    #[error("probability must be in (0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("degrees of freedom must be positive, got {0}")]
    InvalidDegreesOfFreedom(f64),
}
