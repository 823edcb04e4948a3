use super::tensor::Tensor4;
use crate::dist::{Family, Params};
use crate::error::{Error, Result};
use crate::scoring::{crps_csgd_grad, crps_gtcnd_grad};

/// Lower bound added to every positive scale-like parameter.
pub const PARAM_FLOOR: f64 = 1e-3;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output link of a model: the family and an optional upper bound on its
/// scale parameter (σ for GTCND, θ for CSGD). Off by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub family: Family,
    pub scale_cap: Option<f64>,
}

impl From<Family> for Link {
    fn from(family: Family) -> Self {
        Link {
            family,
            scale_cap: None,
        }
    }
}

impl Link {
    /// Index of the capped parameter in the triple.
    pub fn scale_index(&self) -> usize {
        match self.family {
            Family::Gtcnd => 2,
            Family::Csgd => 1,
        }
    }
}

/// Parameters at one grid point and their derivatives with respect to the
/// raw outputs (the link is elementwise).
///
/// GTCND: `L = logistic(r0)`, `μ = r1`, `σ = softplus(r2) + floor`.
/// CSGD: `k = softplus(r0) + floor`, `θ = softplus(r1) + floor`,
/// `δ = -softplus(r2) - floor`.
/// A scale cap clamps σ or θ from above, with zero derivative past it.
pub fn link_point(link: impl Into<Link>, r: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let link = link.into();
    let (mut p, mut d) = link_uncapped(link.family, r);
    if let Some(cap) = link.scale_cap {
        let i = link.scale_index();
        if p[i] > cap {
            p[i] = cap;
            d[i] = 0.0;
        }
    }
    (p, d)
}

fn link_uncapped(family: Family, r: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    match family {
        Family::Gtcnd => {
            let l = logistic(r[0]);
            (
                [l, r[1], softplus(r[2]) + PARAM_FLOOR],
                [l * (1.0 - l), 1.0, logistic(r[2])],
            )
        }
        Family::Csgd => (
            [
                softplus(r[0]) + PARAM_FLOOR,
                softplus(r[1]) + PARAM_FLOOR,
                -softplus(r[2]) - PARAM_FLOOR,
            ],
            [logistic(r[0]), logistic(r[1]), -logistic(r[2])],
        ),
    }
}

/// Maps a raw 3-channel output to parameter fields.
pub fn link_params(raw: &Tensor4, link: impl Into<Link>) -> Result<Tensor4> {
    let link = link.into();
    if raw.c != 3 {
        return Err(Error::Shape(format!("link expects 3 channels, got {}", raw.c)));
    }
    let mut out = raw.clone();
    for px in out.data.chunks_exact_mut(3) {
        let (p, _) = link_point(link, [px[0], px[1], px[2]]);
        px.copy_from_slice(&p);
    }
    Ok(out)
}

fn check_mask(t: &Tensor4, obs: &[f64], mask: Option<&[bool]>) -> Result<usize> {
    if obs.len() != t.pixels() {
        return Err(Error::Shape(format!(
            "{} observations for {} grid points",
            obs.len(),
            t.pixels()
        )));
    }
    let cells = t.h * t.w;
    match mask {
        Some(m) if m.len() != cells => Err(Error::Shape(format!("mask has {} cells, grid has {cells}", m.len()))),
        Some(m) => Ok(m.iter().filter(|&&b| b).count() * t.n),
        None => Ok(t.pixels()),
    }
}

/// Mean closed-form CRPS over unmasked points and its gradient with
/// respect to the parameter fields. `mask` covers one `h×w` grid and
/// applies to every batch element.
pub fn crps_loss(params: &Tensor4, obs: &[f64], mask: Option<&[bool]>, family: Family) -> Result<(f64, Vec<f64>)> {
    crps_loss_impl(params, obs, mask, family.into(), false)
}

/// [`crps_loss`] composed with the link; the gradient is with respect to
/// the raw network output.
pub fn crps_loss_raw(
    raw: &Tensor4,
    obs: &[f64],
    mask: Option<&[bool]>,
    link: impl Into<Link>,
) -> Result<(f64, Vec<f64>)> {
    crps_loss_impl(raw, obs, mask, link.into(), true)
}

fn crps_loss_impl(
    t: &Tensor4,
    obs: &[f64],
    mask: Option<&[bool]>,
    link: Link,
    linked: bool,
) -> Result<(f64, Vec<f64>)> {
    let family = link.family;
    if t.c != 3 {
        return Err(Error::Shape(format!("loss expects 3 parameter channels, got {}", t.c)));
    }
    let count = check_mask(t, obs, mask)?;
    if count == 0 {
        return Err(Error::domain("mask excludes every grid point"));
    }
    let cells = t.h * t.w;
    let scale = 1.0 / count as f64;
    let mut grad = vec![0.0; t.len()];
    let mut total = 0.0;
    for (i, &y) in obs.iter().enumerate() {
        if let Some(m) = mask {
            if !m[i % cells] {
                continue;
            }
        }
        let r = [t.data[3 * i], t.data[3 * i + 1], t.data[3 * i + 2]];
        let (p, dp) = if linked { link_point(link, r) } else { (r, [1.0; 3]) };
        Params::from_triple(family, p).map_err(|e| Error::InvalidPoint {
            index: i,
            reason: e.to_string(),
        })?;
        let (v, g) = match family {
            Family::Gtcnd => crps_gtcnd_grad(p[0], p[1], p[2], y),
            Family::Csgd => crps_csgd_grad(p[0], p[1], p[2], y),
        };
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidPoint {
                index: i,
                reason: format!("non-finite CRPS {v} for parameters {p:?}"),
            });
        }
        total += v;
        for k in 0..3 {
            grad[3 * i + k] = g[k] * dp[k] * scale;
        }
    }
    Ok((total * scale, grad))
}
