//! Calibration and discrimination diagnostics: rank histograms with the
//! JPZ flatness test, ROC curves, and masked CRPS skill maps.

use rand::Rng;

use crate::dist::{Censored, CsgdParams, GtcndParams, Params};
use crate::error::{Error, Result};
use crate::grid::GridTensor;
use crate::quantiles::QuantileForecast;
use crate::scoring::skill_score;
use crate::special::std_normal_sf;

/// Ranks available for a 107-quantile forecast.
pub const N_RANKS: usize = 108;
/// Classes of the grouped rank histogram (6 consecutive ranks each).
pub const N_CLASSES: usize = 18;

/// Rank of `y` among sorted forecast values, in `1..=values.len() + 1`.
///
/// Ties are broken uniformly at random among the tied positions, which
/// matters for the point mass at zero.
pub fn rank_among<R: Rng + ?Sized>(values: &[f64], y: f64, rng: &mut R) -> usize {
    let below = values.partition_point(|&v| v < y);
    let ties = values[below..].partition_point(|&v| v <= y);
    let offset = if ties == 0 { 0 } else { rng.random_range(0..=ties) };
    below + 1 + offset
}

/// Rank of `y` among the quantile values of `q`, in `1..=q.len() + 1`.
pub fn observation_rank<R: Rng + ?Sized>(q: &QuantileForecast, y: f64, rng: &mut R) -> usize {
    rank_among(q.values(), y, rng)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankHistogram {
    pub counts: Vec<u64>,
    pub n_total: u64,
}

impl RankHistogram {
    pub fn empty(n_classes: usize) -> Self {
        RankHistogram {
            counts: vec![0; n_classes],
            n_total: 0,
        }
    }

    /// Groups ranks `1..=n_ranks` into `n_classes` consecutive classes.
    pub fn from_ranks(ranks: &[usize], n_ranks: usize, n_classes: usize) -> Result<Self> {
        if n_classes == 0 || n_ranks % n_classes != 0 {
            return Err(Error::domain(format!(
                "{n_ranks} ranks cannot be split into {n_classes} equal classes"
            )));
        }
        let width = n_ranks / n_classes;
        let mut h = RankHistogram::empty(n_classes);
        for &r in ranks {
            if r == 0 || r > n_ranks {
                return Err(Error::domain(format!("rank {r} outside 1..={n_ranks}")));
            }
            h.counts[(r - 1) / width] += 1;
        }
        h.n_total = ranks.len() as u64;
        Ok(h)
    }

    pub fn merge(&mut self, other: &RankHistogram) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::Shape("histograms have different class counts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n_total += other.n_total;
        Ok(())
    }
}

/// The 18-class histogram of ranks `1..=108`.
pub fn rank_histogram(ranks: &[usize]) -> Result<RankHistogram> {
    RankHistogram::from_ranks(ranks, N_RANKS, N_CLASSES)
}

/// One orthogonal component of the flatness test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JpzComponent {
    /// Signed projection of the standardized deviations; for `dispersion`
    /// a positive value means too many extreme ranks (∪ shape).
    pub projection: f64,
    pub chi2: f64,
    pub p_value: f64,
    /// Bonferroni-adjusted p-value, `min(1, 3p)`.
    pub p_adjusted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JpzResult {
    pub bias: JpzComponent,
    pub dispersion: JpzComponent,
    pub wave: JpzComponent,
    pub alpha: f64,
    pub reject_flatness: bool,
}

/// Orthonormal contrasts over `k` classes: linear, symmetric V, one-period
/// cosine, each centered and Gram–Schmidt orthogonalized in that order.
pub fn jpz_contrasts(k: usize) -> [Vec<f64>; 3] {
    let mid = (k as f64 - 1.0) / 2.0;
    let raw: [Vec<f64>; 3] = [
        (0..k).map(|i| i as f64 - mid).collect(),
        (0..k).map(|i| (i as f64 - mid).abs()).collect(),
        (0..k)
            .map(|i| (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / k as f64).cos())
            .collect(),
    ];
    let ones = vec![1.0 / (k as f64).sqrt(); k];
    let mut basis: Vec<Vec<f64>> = vec![ones];
    for mut v in raw {
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let mut it = basis.into_iter().skip(1);
    [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
}

/// Flatness test of a rank histogram.
///
/// The standardized deviations `(O - E)/√E` are projected onto the three
/// contrasts of [`jpz_contrasts`]. Under flatness each squared projection is
/// asymptotically χ²(1); flatness is rejected if any Bonferroni-adjusted
/// p-value falls below `alpha`.
pub fn jpz_test(h: &RankHistogram, alpha: f64) -> Result<JpzResult> {
    let k = h.counts.len();
    if k < 4 {
        return Err(Error::domain(format!(
            "flatness test needs at least 4 classes, got {k}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if h.n_total < 5 * k as u64 {
        return Err(Error::domain(format!(
            "flatness test needs at least {} ranks (5 per class), got {}",
            5 * k,
            h.n_total
        )));
    }
    let expected = h.n_total as f64 / k as f64;
    let dev: Vec<f64> = h
        .counts
        .iter()
        .map(|&o| (o as f64 - expected) / expected.sqrt())
        .collect();
    let comp = |c: &[f64]| {
        let projection: f64 = dev.iter().zip(c).map(|(d, w)| d * w).sum();
        let chi2 = projection * projection;
        // P(χ²(1) > x) = 2·P(Z > √x)
        let p_value = (2.0 * std_normal_sf(projection.abs())).min(1.0);
        JpzComponent {
            projection,
            chi2,
            p_value,
            p_adjusted: (3.0 * p_value).min(1.0),
        }
    };
    let [lin, vee, cos] = jpz_contrasts(k);
    let bias = comp(&lin);
    let dispersion = comp(&vee);
    let wave = comp(&cos);
    let reject_flatness = [bias, dispersion, wave].iter().any(|c| c.p_adjusted < alpha);
    Ok(JpzResult {
        bias,
        dispersion,
        wave,
        alpha,
        reject_flatness,
    })
}

/// Forecasts that can report `P(X > t)`.
pub trait Exceedance {
    fn exceedance_prob(&self, t: f64) -> f64;
}

impl Exceedance for GtcndParams {
    fn exceedance_prob(&self, t: f64) -> f64 {
        (1.0 - self.cdf(t)).clamp(0.0, 1.0)
    }
}

impl Exceedance for CsgdParams {
    fn exceedance_prob(&self, t: f64) -> f64 {
        (1.0 - self.cdf(t)).clamp(0.0, 1.0)
    }
}

impl Exceedance for Params {
    fn exceedance_prob(&self, t: f64) -> f64 {
        (1.0 - self.cdf(t)).clamp(0.0, 1.0)
    }
}

impl Exceedance for QuantileForecast {
    fn exceedance_prob(&self, t: f64) -> f64 {
        self.exceedance(t)
    }
}

pub fn exceedance_prob<F: Exceedance + ?Sized>(forecast: &F, t: f64) -> f64 {
    forecast.exceedance_prob(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(false_alarm_rate, hit_rate)` from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    /// Probability thresholds producing each point after the first.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// ROC curve swept over every distinct forecast probability, warning when
/// `p >= threshold`, with trapezoidal area.
pub fn roc_curve(probs: &[f64], events: &[bool]) -> Result<RocCurve> {
    if probs.len() != events.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} events",
            probs.len(),
            events.len()
        )));
    }
    if let Some(i) = probs.iter().position(|p| p.is_nan()) {
        return Err(Error::domain(format!("probability {i} is NaN")));
    }
    let n_pos = events.iter().filter(|&&e| e).count();
    let n_neg = events.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::domain(format!(
            "ROC needs at least one event and one non-event ({n_pos} events, {n_neg} non-events)"
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let thr = probs[order[i]];
        while i < order.len() && probs[order[i]] == thr {
            if events[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let next = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        let prev = *points.last().expect("nonempty");
        auc += (next.0 - prev.0) * (next.1 + prev.1) * 0.5;
        points.push(next);
        thresholds.push(thr);
    }
    Ok(RocCurve {
        points,
        thresholds,
        auc,
    })
}

/// Grid points retained when averaging scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensorMask {
    pub height: usize,
    pub width: usize,
    pub include: Vec<bool>,
}

impl CensorMask {
    pub fn all(height: usize, width: usize) -> Self {
        CensorMask {
            height,
            width,
            include: vec![true; height * width],
        }
    }

    /// Excludes sea points (`land == 0`) and a border of `border` cells.
    pub fn land_interior(land: &[f64], height: usize, width: usize, border: usize) -> Result<Self> {
        if land.len() != height * width {
            return Err(Error::Shape(format!(
                "land mask has {} cells for {height}x{width}",
                land.len()
            )));
        }
        let include = (0..height * width)
            .map(|ix| {
                let (r, c) = (ix / width, ix % width);
                let inner = r >= border && c >= border && r + border < height && c + border < width;
                inner && land[ix] > 0.5
            })
            .collect();
        Ok(CensorMask { height, width, include })
    }

    /// Excludes only a border of `border` cells.
    pub fn interior(height: usize, width: usize, border: usize) -> Self {
        let ones = vec![1.0; height * width];
        CensorMask::land_interior(&ones, height, width, border).expect("consistent dims")
    }

    pub fn count(&self) -> usize {
        self.include.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrpssMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    pub scores_ref: Vec<f64>,
    /// Per-point skill; `None` where the reference score is zero.
    pub skill: Vec<Option<f64>>,
    pub masked_mean_score: f64,
    pub masked_mean_ref: f64,
    /// Skill of the masked mean scores; `None` if the reference mean is zero.
    pub masked_skill: Option<f64>,
}

/// Per-point skill and the skill of the masked mean scores. Inputs are
/// `[H, W, 1]` mean-score fields.
pub fn crpss_map(scores: &GridTensor, scores_ref: &GridTensor, mask: &CensorMask) -> Result<CrpssMap> {
    let (h, w) = scores.spatial()?;
    if scores.dims() != scores_ref.dims() || scores.dims().len() != 3 || scores.n_channels() != 1 {
        return Err(Error::Shape(format!(
            "score fields must both be HxWx1, got {:?} and {:?}",
            scores.dims(),
            scores_ref.dims()
        )));
    }
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::Shape(format!(
            "mask is {}x{}, grid is {h}x{w}",
            mask.height, mask.width
        )));
    }
    if mask.count() == 0 {
        return Err(Error::domain("censor mask excludes every grid point"));
    }
    let s = scores.data();
    let r = scores_ref.data();
    let skill = s.iter().zip(r).map(|(&a, &b)| skill_score(a, b)).collect();
    let n = mask.count() as f64;
    let sel = |v: &[f64]| -> f64 {
        let kept: Vec<f64> = v
            .iter()
            .zip(&mask.include)
            .filter(|(_, &m)| m)
            .map(|(x, _)| *x)
            .collect();
        crate::scoring::compensated_sum(&kept) / n
    };
    let masked_mean_score = sel(s);
    let masked_mean_ref = sel(r);
    Ok(CrpssMap {
        height: h,
        width: w,
        scores: s.to_vec(),
        scores_ref: r.to_vec(),
        skill,
        masked_mean_score,
        masked_mean_ref,
        masked_skill: skill_score(masked_mean_score, masked_mean_ref),
    })
}
