//! Special functions shared by the censored distribution families.
//!
//! Everything here works in `f64` regardless of how grids are stored.
//! `erfc` and `lgamma` come from `libm`; the regularized incomplete gamma
//! function, its shape derivative, the digamma function and all inverses
//! are implemented here.

use crate::error::{Error, Result};

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 100_000;

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal cdf, `Φ(z) = erfc(-z/√2)/2`.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Upper tail `1 - Φ(z)` without cancellation.
#[inline]
pub fn std_normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// Inverse of the standard normal cdf.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("normal quantile needs p in (0,1), got {p}")));
    }
    Ok(normal_quantile_unchecked(p))
}

// Acklam's rational approximation followed by Halley refinement steps.
pub(crate) fn normal_quantile_unchecked(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    if p == 0.5 {
        return 0.0;
    }
    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Work on whichever tail is smaller so the residual keeps its precision.
    for _ in 0..2 {
        let e = if x <= 0.0 {
            std_normal_cdf(x) - p
        } else {
            (1.0 - p) - std_normal_sf(x)
        };
        let pdf = std_normal_pdf(x);
        if pdf == 0.0 {
            break;
        }
        let u = e / pdf;
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// Natural log of the gamma function for positive arguments.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Digamma function ψ(x) for x > 0.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// Beta function, computed through log-gamma.
pub fn beta_fn(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::domain(format!("beta function needs a, b > 0, got ({a}, {b})")));
    }
    Ok((ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)).exp())
}

/// Gamma density of shape `k` and unit scale.
pub fn gamma_pdf(k: f64, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    if x == 0.0 {
        return if k < 1.0 {
            f64::INFINITY
        } else if k == 1.0 {
            1.0
        } else {
            0.0
        };
    }
    ((k - 1.0) * x.ln() - x - ln_gamma(k)).exp()
}

/// Cdf `G_k(x)` of the unit-scale gamma distribution with shape `k`.
pub fn gamma_cdf(k: f64, x: f64) -> Result<f64> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::domain(format!("gamma cdf needs shape k > 0, got {k}")));
    }
    Ok(gamma_p(k, x))
}

/// Regularized lower incomplete gamma `P(k, x)`; caller guarantees `k > 0`.
pub(crate) fn gamma_p(k: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    if x < k + 1.0 {
        lower_series(k, x)
    } else {
        1.0 - upper_fraction(k, x)
    }
}

/// Regularized upper incomplete gamma `Q(k, x) = 1 - P(k, x)`.
pub(crate) fn gamma_q(k: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    if x < k + 1.0 {
        1.0 - lower_series(k, x)
    } else {
        upper_fraction(k, x)
    }
}

fn lower_series(k: f64, x: f64) -> f64 {
    let prefactor = (k * x.ln() - x - ln_gamma(k + 1.0)).exp();
    if prefactor == 0.0 {
        return 0.0;
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut denom = k;
    for _ in 0..GAMMA_MAX_ITER {
        denom += 1.0;
        term *= x / denom;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    (prefactor * sum).min(1.0)
}

// Modified Lentz evaluation of the continued fraction for Q(k, x).
fn upper_fraction(k: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let prefactor = (k * x.ln() - x - ln_gamma(k)).exp();
    if prefactor == 0.0 {
        return 0.0;
    }
    let mut b = x + 1.0 - k;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - k);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (prefactor * h).clamp(0.0, 1.0)
}

/// `P(k, x)` together with its partial derivatives `(∂P/∂k, ∂P/∂x)`.
///
/// The shape derivative sums the series
/// `P = Σ_n x^(k+n) e^(-x) / Γ(k+n+1)` term by term, each term picking up
/// a factor `ln x - ψ(k+n+1)`.
pub(crate) fn gamma_p_with_grad(k: f64, x: f64) -> (f64, f64, f64) {
    if x <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let p = gamma_p(k, x);
    let dx = gamma_pdf(k, x);
    let q = 1.0 - p;
    // Far in the upper tail the shape sensitivity is below double precision.
    if x > k + 1.0 && gamma_q(k, x) < 1e-18 && q < 1e-15 {
        return (p, 0.0, dx);
    }
    let lnx = x.ln();
    let mut term = (k * lnx - x - ln_gamma(k + 1.0)).exp();
    let mut psi = digamma(k + 1.0);
    let mut sum_dk = 0.0;
    let mut n = 0.0;
    let mut past_peak = false;
    for _ in 0..GAMMA_MAX_ITER {
        sum_dk += term * (lnx - psi);
        let ratio = x / (k + n + 1.0);
        if ratio < 1.0 {
            past_peak = true;
        }
        if past_peak && term * (1.0 + (lnx - psi).abs()) < 1e-18 {
            break;
        }
        term *= ratio;
        psi += 1.0 / (k + n + 1.0);
        n += 1.0;
    }
    (p, sum_dk, dx)
}

/// Quantile of the unit-scale gamma distribution, `γ⁻¹(k, pΓ(k))`.
pub fn gamma_quantile(k: f64, p: f64) -> Result<f64> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::domain(format!("gamma quantile needs shape k > 0, got {k}")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("gamma quantile needs p in [0,1), got {p}")));
    }
    Ok(gamma_quantile_unchecked(k, p))
}

pub(crate) fn gamma_quantile_unchecked(k: f64, p: f64) -> f64 {
    gamma_quantile_from(k, p, None)
}

/// Gamma quantile started from `guess` when given, e.g. the quantile of a
/// neighbouring level.
pub(crate) fn gamma_quantile_from(k: f64, p: f64, guess: Option<f64>) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    let mut x = match guess {
        Some(g) if g > 0.0 && g.is_finite() => g,
        _ => {
            // Wilson–Hilferty starting point, replaced by the small-x
            // expansion in the lower tail where it is poor.
            let z = normal_quantile_unchecked(p);
            let c = 1.0 / (9.0 * k);
            let wh = k * (1.0 - c + z * c.sqrt()).powi(3);
            let small = ((p.ln() + ln_gamma(k + 1.0)) / k).exp();
            if wh > 0.0 && wh > small {
                wh
            } else {
                small
            }
        }
    };
    if !x.is_finite() || x <= 0.0 {
        x = k.max(1e-300);
    }

    // Bracket.
    let mut lo = 0.0;
    let mut hi;
    if gamma_p(k, x) < p {
        lo = x;
        let mut h = x.max(1.0);
        loop {
            h *= 2.0;
            if gamma_p(k, h) >= p {
                hi = h;
                break;
            }
            lo = h;
        }
    } else {
        hi = x;
    }

    // Safeguarded Newton: fall back to bisection whenever the step leaves
    // the bracket.
    for _ in 0..200 {
        let f = if p > 0.5 {
            (1.0 - p) - gamma_q(k, x)
        } else {
            gamma_p(k, x) - p
        };
        if f == 0.0 {
            return x;
        }
        if f < 0.0 {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        let pdf = gamma_pdf(k, x);
        let mut next = if pdf > 0.0 && pdf.is_finite() {
            x - f / pdf
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            // Geometric steps handle the tiny quantiles of small shapes.
            next = if lo == 0.0 {
                0.01 * hi
            } else if hi > 4.0 * lo {
                (lo * hi).sqrt()
            } else {
                0.5 * (lo + hi)
            };
        }
        if ((next - x).abs() <= 1e-15 * x.abs()) || (hi - lo) <= 1e-15 * hi {
            return next;
        }
        x = next;
    }
    x
}
