//! Quantile forecasts on a fixed level grid.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Number of levels in the default grid.
pub const DEFAULT_N_LEVELS: usize = 107;

/// Equidistant levels `i/(n+1)`, `i = 1..=n`.
pub fn equidistant_levels(n: usize) -> Arc<[f64]> {
    let denom = (n + 1) as f64;
    (1..=n).map(|i| i as f64 / denom).collect()
}

/// The 107-level grid `i/108`.
pub fn default_levels() -> Arc<[f64]> {
    equidistant_levels(DEFAULT_N_LEVELS)
}

pub fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::domain("quantile level grid is empty"));
    }
    if levels.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::domain("quantile levels must lie in (0,1)"));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("quantile levels must be strictly increasing"));
    }
    Ok(())
}

/// Quantile values at fixed probability levels for one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileForecast {
    levels: Arc<[f64]>,
    values: Vec<f64>,
}

impl QuantileForecast {
    /// Validates and wraps `values`; levels are shared between forecasts.
    pub fn new(levels: Arc<[f64]>, values: Vec<f64>) -> Result<Self> {
        validate_levels(&levels)?;
        if values.len() != levels.len() {
            return Err(Error::Shape(format!(
                "{} quantile values for {} levels",
                values.len(),
                levels.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain(format!(
                "quantile value {i} is negative or not finite: {}",
                values[i]
            )));
        }
        if let Some(i) = values.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::domain(format!(
                "quantile values decrease between levels {} and {}",
                i,
                i + 1
            )));
        }
        Ok(QuantileForecast { levels, values })
    }

    /// Quantiles of a distribution evaluated on `levels`.
    pub fn from_fn<F>(levels: Arc<[f64]>, mut quantile: F) -> Result<Self>
    where
        F: FnMut(f64) -> Result<f64>,
    {
        let values = levels.iter().map(|&a| quantile(a)).collect::<Result<Vec<_>>>()?;
        QuantileForecast::new(levels, values)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn shared_levels(&self) -> &Arc<[f64]> {
        &self.levels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Cdf induced by linear interpolation of the quantile function.
    ///
    /// Knots are `(q_i, α_i)`; below the first knot the cdf rises linearly
    /// from `(0, 0)`, above the last it continues with the final slope until
    /// it reaches 1. Ties take the largest level (right continuity).
    pub fn cdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let q = &self.values;
        let a = &self.levels;
        let n = q.len();
        let j = q.partition_point(|&v| v <= t);
        if j == 0 {
            return if q[0] > 0.0 { a[0] * t / q[0] } else { a[0] };
        }
        if j == n {
            let top = a[n - 1];
            // Slope of the last non-degenerate segment.
            let mut i = n - 1;
            while i > 0 && q[i - 1] == q[n - 1] {
                i -= 1;
            }
            let (q_lo, a_lo) = if i == 0 { (0.0, 0.0) } else { (q[i - 1], a[i - 1]) };
            let dq = q[n - 1] - q_lo;
            if dq <= 0.0 {
                return top;
            }
            let slope = (top - a_lo) / dq;
            return (top + slope * (t - q[n - 1])).min(1.0);
        }
        let (q0, q1) = (q[j - 1], q[j]);
        let (a0, a1) = (a[j - 1], a[j]);
        a0 + (a1 - a0) * (t - q0) / (q1 - q0)
    }

    /// `1 - F(t)` from the interpolated cdf.
    pub fn exceedance(&self, t: f64) -> f64 {
        (1.0 - self.cdf(t)).clamp(0.0, 1.0)
    }
}
