//! Scalar abstraction used to write the closed-form scores once and get
//! both plain values and exact parameter gradients out of them.
//!
//! [`Dual3`] carries three forward-mode tangents, one per distribution
//! parameter, which is what the network loss needs per grid point.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::special;

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn norm_cdf(self) -> Self;
    /// `ln φ(z)`.
    fn log_norm_pdf(self) -> Self;
    /// `ln(1 - Φ(z))`, accurate far into the upper tail.
    fn log_norm_sf(self) -> Self;
    fn ln_gamma(self) -> Self;
    /// Regularized lower incomplete gamma `P(k, x)`.
    fn gamma_p(k: Self, x: Self) -> Self;

    fn scale(self, s: f64) -> Self {
        self * Self::cst(s)
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub(crate) fn log_norm_sf_f64(z: f64) -> f64 {
    if z < 35.0 {
        special::std_normal_sf(z).ln()
    } else {
        // Asymptotic Mills-ratio expansion.
        let r = 1.0 / (z * z);
        let series = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r * (1.0 - 9.0 * r))));
        -0.5 * z * z - LN_SQRT_2PI - z.ln() + series.ln()
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn norm_cdf(self) -> Self {
        special::std_normal_cdf(self)
    }
    #[inline]
    fn log_norm_pdf(self) -> Self {
        -0.5 * self * self - LN_SQRT_2PI
    }
    #[inline]
    fn log_norm_sf(self) -> Self {
        log_norm_sf_f64(self)
    }
    #[inline]
    fn ln_gamma(self) -> Self {
        special::ln_gamma(self)
    }
    #[inline]
    fn gamma_p(k: Self, x: Self) -> Self {
        special::gamma_p(k, x)
    }
}

/// Value plus three tangent components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual3 {
    pub v: f64,
    pub d: [f64; 3],
}

impl Dual3 {
    /// Independent variable number `slot`.
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; 3];
        d[slot] = 1.0;
        Dual3 { v, d }
    }

    #[inline]
    fn chain(self, v: f64, dv: f64) -> Self {
        Dual3 {
            v,
            d: [self.d[0] * dv, self.d[1] * dv, self.d[2] * dv],
        }
    }
}

impl Add for Dual3 {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual3 {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual3 {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

impl Mul for Dual3 {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; 3];
        for (i, di) in d.iter_mut().enumerate() {
            *di = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual3 { v: self.v * o.v, d }
    }
}

impl Div for Dual3 {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; 3];
        for (i, di) in d.iter_mut().enumerate() {
            *di = (self.d[i] - v * o.d[i]) * inv;
        }
        Dual3 { v, d }
    }
}

impl Neg for Dual3 {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual3 {
            v: -self.v,
            d: [-self.d[0], -self.d[1], -self.d[2]],
        }
    }
}

impl Scalar for Dual3 {
    fn cst(v: f64) -> Self {
        Dual3 { v, d: [0.0; 3] }
    }
    fn value(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn norm_cdf(self) -> Self {
        self.chain(special::std_normal_cdf(self.v), special::std_normal_pdf(self.v))
    }
    fn log_norm_pdf(self) -> Self {
        self.chain(self.v.log_norm_pdf(), -self.v)
    }
    fn log_norm_sf(self) -> Self {
        let ls = log_norm_sf_f64(self.v);
        // d/dz ln S(z) = -φ(z)/S(z)
        let ratio = (self.v.log_norm_pdf() - ls).exp();
        self.chain(ls, -ratio)
    }
    fn ln_gamma(self) -> Self {
        self.chain(special::ln_gamma(self.v), special::digamma(self.v))
    }
    fn gamma_p(k: Self, x: Self) -> Self {
        let (p, dk, dx) = special::gamma_p_with_grad(k.v, x.v);
        let mut d = [0.0; 3];
        for (i, di) in d.iter_mut().enumerate() {
            *di = dk * k.d[i] + dx * x.d[i];
        }
        Dual3 { v: p, d }
    }
}
