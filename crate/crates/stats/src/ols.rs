use serde::{Deserialize, Serialize};

use crate::tdist::student_t_quantile;
use crate::StatsError;

/// Ordinary least-squares fit of `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
    /// Residual standard error, `sqrt(SSE / (n - 2))`.
    pub residual_std: f64,
    pub mean_x: f64,
    /// Σ(xᵢ − x̄)²
    pub sxx: f64,
    pub r_squared: f64,
}

impl RegressionModel {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }

    /// Standard error of the slope estimate.
    pub fn slope_std_error(&self) -> f64 {
        self.residual_std / self.sxx.sqrt()
    }

    /// Two-sided Student-t critical value for this model's n − 2 degrees of freedom.
    pub fn t_critical(&self, confidence: f64) -> Result<f64, StatsError> {
        if self.n <= 2 {
            return Err(StatsError::TooFewPoints { n: self.n, needed: 3 });
        }
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(StatsError::InvalidProbability(confidence));
        }
        student_t_quantile(1.0 - (1.0 - confidence) / 2.0, (self.n - 2) as f64)
    }
}

pub fn fit_linear(points: &[(f64, f64)]) -> Result<RegressionModel, StatsError> {
    let n = points.len();
    if n < 3 {
        return Err(StatsError::TooFewPoints { n, needed: 3 });
    }
    let nf = n as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if !(sxx > 0.0) {
        return Err(StatsError::DegenerateX);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let sse: f64 = points
        .iter()
        .map(|&(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(RegressionModel {
        slope,
        intercept,
        n,
        residual_std: (sse / (nf - 2.0)).sqrt(),
        mean_x,
        sxx,
        r_squared,
    })
}

/// Prediction interval for a new observation at `x0`:
/// ŷ₀ ± t(1 − α/2; n − 2) · s · sqrt(1 + 1/n + (x₀ − x̄)² / Sxx).
pub fn prediction_interval(model: &RegressionModel, x0: f64, confidence: f64) -> Result<(f64, f64), StatsError> {
    let t = model.t_critical(confidence)?;
    let n = model.n as f64;
    let dx = x0 - model.mean_x;
    let half = t * model.residual_std * (1.0 + 1.0 / n + dx * dx / model.sxx).sqrt();
    let y0 = model.predict(x0);
    Ok((y0 - half, y0 + half))
}

/// Upper bounds measured at one ballast level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallastLevel {
    pub ballast_bytes: f64,
    pub operators: u32,
    /// One upper bound per run, in bytes.
    pub bounds: Vec<f64>,
}

/// Per-operator growth of the memory bound per byte of ballast, with a
/// t-based confidence interval on the slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeEstimate {
    /// Bytes of bound per byte of ballast, divided by the operator count.
    pub per_operator: f64,
    pub half_width: f64,
    pub low: f64,
    pub high: f64,
    pub model: RegressionModel,
}

/// Pools every run's bound across ballast levels, regresses bound on ballast
/// and scales the slope and its interval by the operator count.
pub fn slope_with_ci(levels: &[BallastLevel], confidence: f64) -> Result<SlopeEstimate, StatsError> {
    let mut distinct: Vec<f64> = levels.iter().map(|l| l.ballast_bytes).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(StatsError::TooFewLevels { levels: distinct.len() });
    }
    let operators = levels[0].operators;
    if operators == 0 || levels.iter().any(|l| l.operators != operators) {
        return Err(StatsError::MixedOperatorCounts);
    }
    let points: Vec<(f64, f64)> = levels
        .iter()
        .flat_map(|l| l.bounds.iter().map(move |&b| (l.ballast_bytes, b)))
        .collect();
    let model = fit_linear(&points)?;
    let ops = f64::from(operators);
    let half_width = model.t_critical(confidence)? * model.slope_std_error() / ops;
    let per_operator = model.slope / ops;
    Ok(SlopeEstimate {
        per_operator,
        half_width,
        low: per_operator - half_width,
        high: per_operator + half_width,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let m = fit_linear(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]).unwrap();
        assert!((m.slope - 2.0).abs() < 1e-12);
        assert!(m.intercept.abs() < 1e-12);
        assert!(m.residual_std.abs() < 1e-12);
        assert_eq!(m.n, 3);
    }

    #[test]
    fn flat_line() {
        let m = fit_linear(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]).unwrap();
        assert_eq!(m.slope, 0.0);
        assert_eq!(m.intercept, 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(fit_linear(&[(1.0, 1.0), (2.0, 2.0)]), Err(StatsError::TooFewPoints { n: 2, needed: 3 }));
        assert_eq!(fit_linear(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]), Err(StatsError::DegenerateX));
    }

    #[test]
    fn zero_residual_interval_is_a_point() {
        let m = fit_linear(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]).unwrap();
        let (lo, hi) = prediction_interval(&m, 10.0, 0.95).unwrap();
        assert!((lo - 20.0).abs() < 1e-9 && (hi - 20.0).abs() < 1e-9);
    }

    #[test]
    fn hand_evaluated_interval() {
        let m = RegressionModel {
            slope: 1.0,
            intercept: 0.0,
            n: 10,
            residual_std: 1.0,
            mean_x: 55.0,
            sxx: 8250.0,
            r_squared: 0.0,
        };
        let (lo, hi) = prediction_interval(&m, 55.0, 0.95).unwrap();
        assert!((lo - 52.581).abs() < 1e-3, "{lo}");
        assert!((hi - 57.419).abs() < 1e-3, "{hi}");
    }

    #[test]
    fn interval_widens_away_from_mean() {
        let m = RegressionModel {
            slope: 2.0,
            intercept: 1.0,
            n: 12,
            residual_std: 3.0,
            mean_x: 5.0,
            sxx: 40.0,
            r_squared: 0.5,
        };
        let width = |x| {
            let (l, h) = prediction_interval(&m, x, 0.95).unwrap();
            h - l
        };
        let mut last = width(5.0);
        for k in 1..50 {
            let w_right = width(5.0 + k as f64);
            let w_left = width(5.0 - k as f64);
            assert!(w_right > last && (w_right - w_left).abs() < 1e-9);
            last = w_right;
        }
    }

    #[test]
    fn too_small_model_has_no_interval() {
        let mut m = fit_linear(&[(1.0, 2.0), (2.0, 4.5), (3.0, 6.0)]).unwrap();
        m.n = 2;
        assert!(prediction_interval(&m, 1.0, 0.95).is_err());
    }

    #[test]
    fn exact_unit_slope() {
        const MIB: f64 = 1024.0 * 1024.0;
        let levels: Vec<BallastLevel> = (0..4)
            .map(|k| BallastLevel {
                ballast_bytes: k as f64 * MIB,
                operators: 20,
                bounds: vec![50.0 * MIB + 20.0 * k as f64 * MIB; 3],
            })
            .collect();
        let est = slope_with_ci(&levels, 0.95).unwrap();
        assert!((est.per_operator - 1.0).abs() < 1e-12);
        assert!(est.half_width.abs() < 1e-9);
    }

    #[test]
    fn single_level_is_rejected() {
        let levels = [BallastLevel { ballast_bytes: 0.0, operators: 5, bounds: vec![1.0, 2.0, 3.0] }];
        assert_eq!(slope_with_ci(&levels, 0.95), Err(StatsError::TooFewLevels { levels: 1 }));
    }
}
