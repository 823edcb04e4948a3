//! Moments-method inference for both families and the gated tail
//! extension applied to quantile forecasts.

use serde::{Deserialize, Serialize};

use crate::dist::{Censored, CsgdParams, Family, GtcndParams, Params};
use crate::error::{Error, Result};
use crate::quantiles::QuantileForecast;
use crate::special::{gamma_q, std_normal_cdf, std_normal_pdf};

pub use crate::quantiles::{default_levels, equidistant_levels};

/// Raw moments of a quantile forecast read as an equiprobable sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalMoments {
    pub dry_frac: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

pub fn empirical_moments(q: &QuantileForecast) -> EmpiricalMoments {
    let n = q.len() as f64;
    let (mut dry, mut s1, mut s2, mut s3) = (0usize, 0.0, 0.0, 0.0);
    for &v in q.values() {
        if v == 0.0 {
            dry += 1;
        }
        s1 += v;
        s2 += v * v;
        s3 += v * v * v;
    }
    EmpiricalMoments {
        dry_frac: dry as f64 / n,
        m1: s1 / n,
        m2: s2 / n,
        m3: s3 / n,
    }
}

/// Location and scale reported for a forecast that is dry with certainty.
pub const DRY_SENTINEL: (f64, f64) = (0.0, 1.0);

// Standardized truncation a = μ/σ. Below A_MIN the variance formula loses
// too many digits to cancellation; above A_MAX truncation is invisible in
// double precision.
const A_MIN: f64 = -12.0;
const A_MAX: f64 = 8.0;

// Squared coefficient of variation of N(aσ, σ²) truncated to (0, ∞).
fn truncated_cv2(a: f64) -> f64 {
    let lam = std_normal_pdf(a) / std_normal_cdf(a);
    let mean = a + lam;
    let var = 1.0 - a * lam - lam * lam;
    var / (mean * mean)
}

/// Fits a GTCND to the dry fraction and the first two raw moments of the
/// full sample (zeros included).
///
/// `L` is the dry fraction; the wet part's conditional moments
/// `m1/(1-L)`, `m2/(1-L)` are matched to the zero-truncated normal. The two
/// equations collapse to one in the standardized truncation point `μ/σ`
/// (the coefficient of variation does not depend on scale), which is solved
/// by bisection; the scale then follows from the mean.
pub fn fit_gtcnd(dry_frac: f64, m1: f64, m2: f64) -> Result<GtcndParams> {
    if !(0.0..=1.0).contains(&dry_frac) {
        return Err(Error::domain(format!("dry fraction {dry_frac} outside [0,1]")));
    }
    if !(m1 >= 0.0 && m2.is_finite() && m2 >= m1 * m1) {
        return Err(Error::Fit(format!("infeasible moments m1={m1}, m2={m2}")));
    }
    if dry_frac == 1.0 {
        return GtcndParams::new(1.0, DRY_SENTINEL.0, DRY_SENTINEL.1);
    }
    let wet = 1.0 - dry_frac;
    let c1 = m1 / wet;
    let c2 = m2 / wet;
    let var = c2 - c1 * c1;
    if !(c1 > 0.0) || !(var > 0.0) {
        return Err(Error::Fit(format!(
            "no σ > 0 solution: conditional mean {c1}, conditional variance {var}"
        )));
    }
    let target = var / (c1 * c1);
    if target >= truncated_cv2(A_MIN) {
        return Err(Error::Fit(format!(
            "wet-part coefficient of variation² {target:.6} exceeds the truncated-normal range ({:.6})",
            truncated_cv2(A_MIN)
        )));
    }
    let a = if target <= truncated_cv2(A_MAX) {
        c1 / var.sqrt()
    } else {
        let (mut lo, mut hi) = (A_MIN, A_MAX);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            // cv² decreases in a.
            if truncated_cv2(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let lam = std_normal_pdf(a) / std_normal_cdf(a);
    let sigma = c1 / (a + lam);
    GtcndParams::new(dry_frac, a * sigma, sigma)
}

/// `E[max(0, Z - c)^n]` for `Z ~ Gamma(k, 1)`, `n = 1, 2, 3`.
fn censored_gamma_moments(k: f64, c: f64) -> [f64; 3] {
    let q0 = gamma_q(k, c);
    let q1 = gamma_q(k + 1.0, c);
    let q2 = gamma_q(k + 2.0, c);
    let q3 = gamma_q(k + 3.0, c);
    let r1 = k;
    let r2 = k * (k + 1.0);
    let r3 = r2 * (k + 2.0);
    [
        r1 * q1 - c * q0,
        r2 * q2 - 2.0 * c * r1 * q1 + c * c * q0,
        r3 * q3 - 3.0 * c * r2 * q2 + 3.0 * c * c * r1 * q1 - c * c * c * q0,
    ]
}

// Search ranges for ln k and ln c̃.
const LN_K_RANGE: (f64, f64) = (-9.2, 13.8);
const LN_C_RANGE: (f64, f64) = (-27.6, 5.3);

/// `(ln(M2/M1²), ln(M3/M1³))` of the standardized censored gamma.
fn log_ratios(k: f64, c: f64) -> Option<(f64, f64)> {
    let [m1, m2, m3] = censored_gamma_moments(k, c);
    if !(m1 > 0.0 && m2 > 0.0 && m3 > 0.0) {
        return None;
    }
    let r2 = (m2 / (m1 * m1)).ln();
    let r3 = (m3 / (m1 * m1 * m1)).ln();
    (r2.is_finite() && r3.is_finite()).then_some((r2, r3))
}

/// Root of a decreasing function on `[lo, hi]` by the Illinois variant of
/// regula falsi. Endpoint values must bracket zero.
fn illinois<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, mut f_lo: f64, mut f_hi: f64) -> f64 {
    let mut side = 0i8;
    for _ in 0..200 {
        let x = if f_lo.is_finite() && f_hi.is_finite() && f_lo != f_hi {
            let x = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
            if x > lo && x < hi {
                x
            } else {
                0.5 * (lo + hi)
            }
        } else {
            0.5 * (lo + hi)
        };
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx > 0.0 {
            lo = x;
            f_lo = fx;
            if side == 1 {
                f_hi *= 0.5;
            }
            side = 1;
        } else {
            hi = x;
            f_hi = fx;
            if side == -1 {
                f_lo *= 0.5;
            }
            side = -1;
        }
        if hi - lo <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Shape `k` whose standardized `ln(M2/M1²)` at censoring point `c`
/// equals `target`; `Err(sign)` reports which side of the range it lies on.
fn shape_for_ratio(c: f64, target: f64) -> std::result::Result<f64, f64> {
    // ln(M2/M1²) decreases in k.
    let g = |u: f64| log_ratios(u.exp(), c).map_or(f64::NAN, |r| r.0 - target);
    let (lo, hi) = LN_K_RANGE;
    let (g_lo, g_hi) = (g(lo), g(hi));
    if !(g_lo >= 0.0) {
        return Err(-1.0);
    }
    if !(g_hi <= 0.0) {
        return Err(1.0);
    }
    Ok(illinois(g, lo, hi, g_lo, g_hi).exp())
}

/// Fits a CSGD to the first three raw moments.
///
/// `X = θ max(0, Z - c̃)` with `Z ~ Gamma(k, 1)`, so the scale-free ratios
/// `m2/m1²` and `m3/m1³` depend on `(k, c̃)` only. For fixed `c̃` the first
/// ratio is monotone in `k`; along that curve the second ratio falls as
/// `c̃` grows. Both one-dimensional problems are solved by bracketed root
/// finding, then `θ` follows from the mean and `δ = -c̃θ`. Moments that
/// match an uncensored gamma end at the lower edge of the `c̃` range.
pub fn fit_csgd(m1: f64, m2: f64, m3: f64) -> Result<CsgdParams> {
    if !(m1 > 0.0 && m2.is_finite() && m3.is_finite()) || m2 <= m1 * m1 {
        return Err(Error::Fit(format!("infeasible moments m1={m1}, m2={m2}, m3={m3}")));
    }
    let ln_r2 = (m2 / (m1 * m1)).ln();
    let ln_r3 = (m3 / (m1 * m1 * m1)).ln();
    if !ln_r3.is_finite() {
        return Err(Error::Fit(format!("third moment {m3} is not usable")));
    }
    let skew_gap = |v: f64| -> f64 {
        let c = v.exp();
        match shape_for_ratio(c, ln_r2) {
            Ok(k) => log_ratios(k, c).map_or(f64::NAN, |r| r.1 - ln_r3),
            // k below range: tiny c, heavy skew; above range: large c.
            Err(side) => -side * f64::INFINITY,
        }
    };
    let (lo, hi) = LN_C_RANGE;
    let (g_lo, g_hi) = (skew_gap(lo), skew_gap(hi));
    if g_lo.is_nan() || g_hi.is_nan() {
        return Err(Error::Fit("moment ratios could not be evaluated".into()));
    }
    let v = if g_lo <= 0.0 {
        // At or below the skewness of an uncensored gamma.
        if g_lo < -1e-9 * (1.0 + ln_r3.abs()) {
            return Err(Error::Fit(format!(
                "third moment too small for a censored gamma (log-ratio gap {g_lo:.3e})"
            )));
        }
        lo
    } else if g_hi > 0.0 {
        return Err(Error::Fit(format!(
            "third moment too large for a censored gamma (gap {g_hi:.3e})"
        )));
    } else {
        illinois(skew_gap, lo, hi, g_lo, g_hi)
    };
    let c = v.exp();
    let k = shape_for_ratio(c, ln_r2).map_err(|_| Error::Fit("shape left its search range".into()))?;
    let [mm1, _, _] = censored_gamma_moments(k, c);
    let theta = m1 / mm1;
    CsgdParams::new(k, theta, -c * theta)
}

/// Which quantile levels the tail extension may overwrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelSubset {
    /// The highest `n` levels.
    Top(usize),
    /// Explicit level indices.
    Indices(Vec<usize>),
}

impl LevelSubset {
    pub fn indices(&self, n_levels: usize) -> Vec<usize> {
        match self {
            LevelSubset::Top(n) => (n_levels.saturating_sub(*n)..n_levels).collect(),
            LevelSubset::Indices(ix) => {
                let mut v: Vec<usize> = ix.iter().copied().filter(|&i| i < n_levels).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailConfig {
    pub family: Family,
    pub activation_threshold: f64,
    pub activation_prob: f64,
    pub levels_to_update: LevelSubset,
}

impl Default for TailConfig {
    fn default() -> Self {
        TailConfig {
            family: Family::Gtcnd,
            activation_threshold: 5.0,
            activation_prob: 0.05,
            levels_to_update: LevelSubset::Top(10),
        }
    }
}

impl TailConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.activation_threshold >= 0.0 && self.activation_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "tail activation_threshold must be >= 0, got {}",
                self.activation_threshold
            )));
        }
        if !(self.activation_prob > 0.0 && self.activation_prob < 1.0) {
            return Err(Error::Config(format!(
                "tail activation_prob must lie in (0,1), got {}",
                self.activation_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TailStatus {
    /// Exceedance probability below the gate; forecast returned unchanged.
    Inactive { exceedance: f64 },
    /// Fit succeeded; `updated` levels were raised.
    Extended { fit: Params, updated: usize },
    /// Fit failed; forecast returned unchanged.
    FitFailed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailOutcome {
    pub forecast: QuantileForecast,
    pub status: TailStatus,
}

/// Fits the configured family to the moments of `q`.
pub fn fit_family(family: Family, q: &QuantileForecast) -> Result<Params> {
    let m = empirical_moments(q);
    Ok(match family {
        Family::Gtcnd => Params::Gtcnd(fit_gtcnd(m.dry_frac, m.m1, m.m2)?),
        Family::Csgd => Params::Csgd(fit_csgd(m.m1, m.m2, m.m3)?),
    })
}

/// Raises quantiles on the selected levels to those of `fit` where the
/// fitted value is higher. Levels outside the subset never change, and
/// updated values are capped by the next untouched level above them so the
/// output stays nondecreasing.
pub fn apply_tail_fit<D: Censored>(
    q: &QuantileForecast,
    fit: &D,
    subset: &LevelSubset,
) -> Result<(QuantileForecast, usize)> {
    let levels = q.levels();
    let orig = q.values();
    let n = orig.len();
    let idx = subset.indices(n);
    let mut update = vec![false; n];
    for &i in &idx {
        update[i] = true;
    }
    let mut out = orig.to_vec();
    let mut cap = f64::INFINITY;
    let mut changed = 0;
    for i in (0..n).rev() {
        if !update[i] {
            cap = orig[i];
            continue;
        }
        let fitted = fit.quantile(levels[i])?;
        let candidate = fitted.min(cap);
        if candidate > orig[i] {
            out[i] = candidate;
            changed += 1;
        }
    }
    Ok((QuantileForecast::new(q.shared_levels().clone(), out)?, changed))
}

/// Gated tail extension of a quantile forecast.
///
/// Returns `q` unchanged when its interpolated exceedance probability of
/// `activation_threshold` is below `activation_prob`, or when the moments
/// fit fails (reported in the status).
pub fn tail_extend(q: &QuantileForecast, cfg: &TailConfig) -> Result<TailOutcome> {
    let exceedance = q.exceedance(cfg.activation_threshold);
    if exceedance < cfg.activation_prob {
        return Ok(TailOutcome {
            forecast: q.clone(),
            status: TailStatus::Inactive { exceedance },
        });
    }
    let fit = match fit_family(cfg.family, q) {
        Ok(f) => f,
        Err(e) => {
            return Ok(TailOutcome {
                forecast: q.clone(),
                status: TailStatus::FitFailed(e.to_string()),
            })
        }
    };
    let (forecast, updated) = apply_tail_fit(q, &fit, &cfg.levels_to_update)?;
    Ok(TailOutcome {
        forecast,
        status: TailStatus::Extended { fit, updated },
    })
}
