//! Proper scoring rules: CRPS in its threshold, quantile and kernel
//! representations, closed forms for both censored families, ensemble
//! estimators and skill scores.

use std::f64::consts::PI;

use crate::dist::Censored;
use crate::dual::Scalar;
use crate::error::{Error, Result};
use crate::quad;
use crate::quantiles::QuantileForecast;

/// Mean score over a set of cases.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub mean_score: f64,
    pub n: usize,
    pub per_point: Option<Vec<f64>>,
}

impl ScoreSummary {
    pub fn from_scores(scores: Vec<f64>, keep_per_point: bool) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::domain("score summary needs at least one case"));
        }
        let mean_score = compensated_sum(&scores) / scores.len() as f64;
        Ok(ScoreSummary {
            mean_score,
            n: scores.len(),
            per_point: keep_per_point.then_some(scores),
        })
    }
}

/// Neumaier-compensated sum; the result does not depend on accumulation
/// order beyond the last few ulps.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Closed-form GTCND CRPS, generic over the scalar type so the same code
/// yields gradients with respect to `(L, μ, σ)`.
///
/// Written with survival-function ratios so that strongly truncated
/// locations (`μ/σ ≪ 0`) stay finite.
pub fn crps_gtcnd_generic<T: Scalar>(l: T, mu: T, sigma: T, y: f64) -> T {
    let yp = y.max(0.0);
    let one = T::cst(1.0);
    let alpha = -mu / sigma;
    let zy = (T::cst(yp) - mu) / sigma;
    let log_s = alpha.log_norm_sf();
    let wet = one - l;
    let sf_ratio = (zy.log_norm_sf() - log_s).exp();
    let mills_a = (alpha.log_norm_pdf() - log_s).exp();
    let mills_y = (zy.log_norm_pdf() - log_s).exp();
    let tail2 = (alpha.scale(std::f64::consts::SQRT_2).log_norm_sf() - log_s - log_s).exp();

    let t0 = T::cst((y - yp).abs()) + mu * l * l;
    let t1 = (T::cst(yp) - mu) * (one - T::cst(2.0) * wet * sf_ratio);
    let t2 = T::cst(2.0) * sigma * wet * (mills_y - l * mills_a);
    let t3 = wet * wet * sigma * tail2 * T::cst(1.0 / PI.sqrt());
    t0 + t1 + t2 - t3
}

/// Closed-form CSGD CRPS, generic over the scalar type.
///
/// With `ỹ = (y₊ - δ)/θ` and `c̃ = -δ/θ`:
/// `θ[ỹ(2G_k(ỹ) - 1) - c̃G_k(c̃)² + k(1 + 2G_k(c̃)G_{k+1}(c̃) - G_k(c̃)² - 2G_{k+1}(ỹ))
///   - (k/π) B(½, k+½)(1 - G_{2k}(2c̃))] + |y - y₊|`.
pub fn crps_csgd_generic<T: Scalar>(k: T, theta: T, delta: T, y: f64) -> T {
    let yp = y.max(0.0);
    let one = T::cst(1.0);
    let two = T::cst(2.0);
    let yt = (T::cst(yp) - delta) / theta;
    let c = -delta / theta;
    let k1 = k + one;
    let gk_y = T::gamma_p(k, yt);
    let gk_c = T::gamma_p(k, c);
    let gk1_c = T::gamma_p(k1, c);
    let gk1_y = T::gamma_p(k1, yt);
    let g2k_2c = T::gamma_p(k.scale(2.0), c.scale(2.0));
    // B(1/2, k+1/2) = Γ(1/2)Γ(k+1/2)/Γ(k+1)
    let half = T::cst(0.5);
    let beta = (T::cst(0.572_364_942_924_700_1) + (k + half).ln_gamma() - k1.ln_gamma()).exp();
    let inner = yt * (two * gk_y - one) - c * gk_c * gk_c + k * (one + two * gk_c * gk1_c - gk_c * gk_c - two * gk1_y)
        - k * beta * (one - g2k_2c) * T::cst(1.0 / PI);
    theta * inner + T::cst((y - yp).abs())
}

/// Closed-form CRPS of a GTCND forecast.
pub fn crps_gtcnd(p: &crate::dist::GtcndParams, y: f64) -> f64 {
    crps_gtcnd_generic(p.l, p.mu, p.sigma, y)
}

/// Closed-form CRPS of a CSGD forecast.
pub fn crps_csgd(p: &crate::dist::CsgdParams, y: f64) -> f64 {
    crps_csgd_generic(p.k, p.theta, p.delta, y)
}

/// CRPS as the integrated squared difference between `cdf` and the step
/// function at `y`, by adaptive quadrature.
///
/// `support` must bracket the region where `cdf` is strictly between 0 and
/// 1 up to negligible mass; the integrand is split at `y` and at 0.
pub fn crps_numeric<F: Fn(f64) -> f64>(cdf: F, y: f64, support: (f64, f64), tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::domain("quadrature tolerance must be positive"));
    }
    let lo = support.0.min(y) - 1.0;
    let hi = support.1.max(y) + 1.0;
    let mut pts = vec![lo, hi];
    for b in [0.0, y] {
        if b > lo && b < hi {
            pts.push(b);
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    quad::integrate_with_breaks(
        |z| {
            let step = if y <= z { 1.0 } else { 0.0 };
            let d = cdf(z) - step;
            d * d
        },
        &pts,
        tol,
        0.0,
    )
}

/// [`crps_numeric`] for one of the censored families, bracketing the
/// support by `[0, F⁻¹(1 - 1e-12)]`.
pub fn crps_numeric_dist<D: Censored>(d: &D, y: f64, tol: f64) -> Result<f64> {
    let hi = d.quantile(1.0 - 1e-12)?;
    crps_numeric(|z| d.cdf(z), y, (0.0, hi), tol)
}

/// Quantile representation: `2∫₀¹ (1{y ≤ F⁻¹(α)} - α)(F⁻¹(α) - y) dα`.
pub fn crps_pinball_integral<D: Censored>(d: &D, y: f64, tol: f64) -> Result<f64> {
    let breaks = level_breaks(d, y);
    quad::integrate_with_breaks(
        |a| {
            let q = d.quantile(a).unwrap_or(0.0);
            pinball(q, y, a)
        },
        &breaks,
        tol,
        0.0,
    )
}

/// Kernel representation `E|X - y| - ½E|X - X'|` with both expectations
/// written as integrals over the quantile function:
/// `∫|F⁻¹(α) - y| dα - ∫F⁻¹(α)(2α - 1) dα`.
pub fn crps_kernel_integral<D: Censored>(d: &D, y: f64, tol: f64) -> Result<f64> {
    let breaks = level_breaks(d, y);
    quad::integrate_with_breaks(
        |a| {
            let q = d.quantile(a).unwrap_or(0.0);
            (q - y).abs() - q * (2.0 * a - 1.0)
        },
        &breaks,
        tol,
        0.0,
    )
}

fn level_breaks<D: Censored>(d: &D, y: f64) -> Vec<f64> {
    let mut pts = vec![0.0, 1.0];
    for b in [d.point_mass(), d.cdf(y)] {
        if b > 0.0 && b < 1.0 {
            pts.push(b);
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

/// Fair (unbiased) ensemble CRPS:
/// `(1/m)Σ|xᵢ - y| - 1/(2m(m-1)) ΣᵢΣⱼ|xᵢ - xⱼ|`.
pub fn crps_ensemble_fair(members: &[f64], y: f64) -> Result<f64> {
    let m = members.len();
    if m < 2 {
        return Err(Error::domain(format!("fair CRPS needs at least 2 members, got {m}")));
    }
    let (abs_err, spread) = ensemble_terms(members, y);
    let mf = m as f64;
    Ok(abs_err / mf - spread / (2.0 * mf * (mf - 1.0)))
}

/// Energy-form ensemble CRPS: `(1/m)Σ|xᵢ - y| - 1/(2m²) ΣᵢΣⱼ|xᵢ - xⱼ|`.
pub fn crps_ensemble_nrg(members: &[f64], y: f64) -> Result<f64> {
    let m = members.len();
    if m == 0 {
        return Err(Error::domain("energy CRPS needs a nonempty ensemble"));
    }
    let (abs_err, spread) = ensemble_terms(members, y);
    let mf = m as f64;
    Ok((abs_err / mf - spread / (2.0 * mf * mf)).max(0.0))
}

// Returns (Σ|xᵢ - y|, ΣᵢΣⱼ|xᵢ - xⱼ|) in O(m log m).
fn ensemble_terms(members: &[f64], y: f64) -> (f64, f64) {
    let mut sorted = members.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let abs: Vec<f64> = sorted.iter().map(|x| (x - y).abs()).collect();
    let weighted: Vec<f64> = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 - (m - 1.0)))
        .collect();
    (compensated_sum(&abs), 2.0 * compensated_sum(&weighted))
}

/// Pinball (quantile) loss in the CRPS normalization: `2(1{y ≤ q} - α)(q - y)`.
#[inline]
pub fn pinball(q: f64, y: f64, alpha: f64) -> f64 {
    let ind = if y <= q { 1.0 } else { 0.0 };
    2.0 * (ind - alpha) * (q - y)
}

/// Average pinball loss over the forecast's level grid.
pub fn crps_from_quantiles(q: &QuantileForecast, y: f64) -> f64 {
    let losses: Vec<f64> = q
        .values()
        .iter()
        .zip(q.levels())
        .map(|(&v, &a)| pinball(v, y, a))
        .collect();
    compensated_sum(&losses) / losses.len() as f64
}

/// `(ref - s)/ref`; `None` when the reference score is zero or not finite.
pub fn skill_score(mean_s: f64, mean_s_ref: f64) -> Option<f64> {
    if mean_s_ref == 0.0 || !mean_s_ref.is_finite() || !mean_s.is_finite() {
        None
    } else {
        Some((mean_s_ref - mean_s) / mean_s_ref)
    }
}

/// Brier score of the exceedance forecast at threshold `t`: `(F(t) - 1{y ≤ t})²`.
#[inline]
pub fn brier_exceedance(f_at_t: f64, y: f64, t: f64) -> f64 {
    let ind = if y <= t { 1.0 } else { 0.0 };
    (f_at_t - ind) * (f_at_t - ind)
}

/// GTCND CRPS value and gradient with respect to `(L, μ, σ)`.
pub fn crps_gtcnd_grad(l: f64, mu: f64, sigma: f64, y: f64) -> (f64, [f64; 3]) {
    use crate::dual::Dual3;
    let out = crps_gtcnd_generic(Dual3::var(l, 0), Dual3::var(mu, 1), Dual3::var(sigma, 2), y);
    (out.v, out.d)
}

/// CSGD CRPS value and gradient with respect to `(k, θ, δ)`.
pub fn crps_csgd_grad(k: f64, theta: f64, delta: f64, y: f64) -> (f64, [f64; 3]) {
    use crate::dual::Dual3;
    let out = crps_csgd_generic(Dual3::var(k, 0), Dual3::var(theta, 1), Dual3::var(delta, 2), y);
    (out.v, out.d)
}
