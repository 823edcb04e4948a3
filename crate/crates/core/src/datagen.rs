//! Synthetic gridded ensemble data with known truth.
//!
//! Every day draws two smooth unit-variance latent fields `z1`, `z2`. The
//! truth parameters are fixed functions of the latents and of the
//! standardized altitude anomaly `a`. Observations are drawn from the
//! truth, and the raw ensemble from a deliberately distorted copy of it.
//! Predictors are the ensemble's (mean, min, max, sd) per variable plus the
//! selected constant fields.
//!
//! GTCND truth (`lgt` is the logistic, `sp` the softplus):
//!
//! ```text
//! L = lgt(-0.4 - 1.5 z1 - 0.4 a)
//! μ = 0.5 + 1.8 z1 + 0.6 a + 0.5 z2
//! σ = sp(0.3 + 0.4 z1 + 0.5 z2) + 0.2
//! ```
//!
//! CSGD truth:
//!
//! ```text
//! k = sp(0.2 + 0.4 z1 + 0.3 z2) + 0.3
//! θ = sp(0.5 + 0.6 z1 + 0.2 a) + 0.2
//! δ = -(sp(-0.2 - 0.9 z1 - 0.3 a) + 0.05)
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, Dtype, FileRole, Manifest, ManifestEntry};
use crate::dist::{Censored, CsgdParams, Family, GtcndParams, Params};
use crate::error::{Error, Result};
use crate::grid::GridTensor;

/// Constant (day-independent) predictor fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantField {
    Altitude,
    Land,
    DistanceToCoast,
}

impl ConstantField {
    pub const ALL: [ConstantField; 3] = [
        ConstantField::Altitude,
        ConstantField::Land,
        ConstantField::DistanceToCoast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConstantField::Altitude => "altitude",
            ConstantField::Land => "land",
            ConstantField::DistanceToCoast => "dist_coast",
        }
    }
}

fn default_ensemble_size() -> usize {
    17
}
fn default_dispersion() -> f64 {
    0.5
}
fn default_length_scale() -> f64 {
    3.0
}
fn default_variables() -> usize {
    1
}
fn default_constants() -> Vec<ConstantField> {
    vec![ConstantField::Altitude]
}
fn default_val_fraction() -> f64 {
    0.125
}
fn default_test_fraction() -> f64 {
    0.125
}
fn default_sea_fraction() -> f64 {
    0.2
}
fn default_border() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub n_days: usize,
    pub family: Family,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default)]
    pub bias: f64,
    #[serde(default = "default_dispersion")]
    pub dispersion_factor: f64,
    /// Gaussian kernel width of the latent fields, in grid cells.
    #[serde(default = "default_length_scale")]
    pub length_scale: f64,
    /// Ensemble variables; the first is precipitation, the rest are
    /// noisy views of the latent fields.
    #[serde(default = "default_variables")]
    pub n_variables: usize,
    #[serde(default = "default_constants")]
    pub constants: Vec<ConstantField>,
    #[serde(default = "default_sea_fraction")]
    pub sea_fraction: f64,
    /// Border width excluded by the censor mask.
    #[serde(default = "default_border")]
    pub mask_border: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

/// 32×32 grid, 512 days, GTCND truth.
impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig::new(32, 32, 512, Family::Gtcnd, 0)
    }
}

impl SyntheticConfig {
    pub fn new(height: usize, width: usize, n_days: usize, family: Family, seed: u64) -> Self {
        SyntheticConfig {
            height,
            width,
            n_days,
            family,
            ensemble_size: default_ensemble_size(),
            bias: 0.0,
            dispersion_factor: default_dispersion(),
            length_scale: default_length_scale(),
            n_variables: default_variables(),
            constants: default_constants(),
            sea_fraction: default_sea_fraction(),
            mask_border: default_border(),
            val_fraction: default_val_fraction(),
            test_fraction: default_test_fraction(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("grid must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.n_days < 3 {
            return bad(format!(
                "need at least 3 days for a train/val/test split, got {}",
                self.n_days
            ));
        }
        if self.ensemble_size < 2 {
            return bad(format!("ensemble_size must be >= 2, got {}", self.ensemble_size));
        }
        if !(self.dispersion_factor > 0.0 && self.dispersion_factor <= 1.0) {
            return bad(format!(
                "dispersion_factor must lie in (0,1], got {}",
                self.dispersion_factor
            ));
        }
        if !self.bias.is_finite() {
            return bad("bias must be finite".into());
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return bad(format!("length_scale must be positive, got {}", self.length_scale));
        }
        if self.n_variables == 0 {
            return bad("n_variables must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.sea_fraction) {
            return bad(format!("sea_fraction must lie in [0,1), got {}", self.sea_fraction));
        }
        let (v, t) = (self.val_fraction, self.test_fraction);
        if !(v >= 0.0 && t > 0.0 && v + t < 1.0) {
            return bad(format!("val_fraction {v} and test_fraction {t} leave no training days"));
        }
        Ok(())
    }

    /// Number of predictor channels.
    pub fn n_predictors(&self) -> usize {
        predictor_count(self.n_variables, self.constants.len())
    }

    /// Contiguous `(train, val, test)` day-index ranges.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let n = self.n_days;
        let n_test = ((n as f64 * self.test_fraction).round() as usize).clamp(1, n - 2);
        let n_val = ((n as f64 * self.val_fraction).round() as usize).min(n - n_test - 1);
        let n_train = n - n_test - n_val;
        (
            (0..n_train).collect(),
            (n_train..n_train + n_val).collect(),
            (n_train + n_val..n).collect(),
        )
    }
}

/// Predictor count for `n_variables` ensemble variables summarized by
/// (mean, min, max, sd) plus `n_constants` constant fields.
pub fn predictor_count(n_variables: usize, n_constants: usize) -> usize {
    4 * n_variables + n_constants
}

// Independent random streams per purpose and day.
const STREAM_CONSTANTS: u64 = 1;
const STREAM_LATENT: u64 = 2;
const STREAM_OBS: u64 = 3;
const STREAM_RAW: u64 = 4;

fn stream_rng(seed: u64, tag: u64, day: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag << 40 | day);
    rng
}

/// Unit-variance field of Gaussian-smoothed white noise.
///
/// The noise is drawn on a grid padded by the kernel radius and smoothed
/// separably, so the output is statistically stationary up to the edges.
pub fn gaussian_field<R: Rng + ?Sized>(h: usize, w: usize, length_scale: f64, rng: &mut R) -> Vec<f64> {
    let r = (3.0 * length_scale).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let x = i as f64 - r as f64;
            (-x * x / (2.0 * length_scale * length_scale)).exp()
        })
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    // Output variance is (Σw²)² for unit white noise.
    let norm = 1.0 / kernel.iter().map(|k| k * k).sum::<f64>();
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let noise: Vec<f64> = (0..ph * pw).map(|_| rng.sample(StandardNormal)).collect();
    let mut rows = vec![0.0; ph * w];
    for i in 0..ph {
        for j in 0..w {
            rows[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * noise[i * pw + j + k])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let s: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * rows[(i + k) * w + j])
                .sum();
            out[i * w + j] = s * norm;
        }
    }
    out
}

/// Day-independent fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantFields {
    pub height: usize,
    pub width: usize,
    /// Pseudo-altitude in metres.
    pub altitude: Vec<f64>,
    /// Standardized altitude anomaly used by the truth functions.
    pub altitude_anomaly: Vec<f64>,
    /// 1 on land, 0 on sea.
    pub land: Vec<f64>,
    /// Euclidean distance, in cells, to the nearest coastal land cell.
    pub distance: Vec<f64>,
}

impl ConstantFields {
    pub fn field(&self, kind: ConstantField) -> &[f64] {
        match kind {
            ConstantField::Altitude => &self.altitude,
            ConstantField::Land => &self.land,
            ConstantField::DistanceToCoast => &self.distance,
        }
    }

    pub fn to_grid(&self) -> GridTensor {
        let mut data = Vec::with_capacity(self.altitude.len() * 3);
        for i in 0..self.altitude.len() {
            data.extend([self.altitude[i], self.land[i], self.distance[i]]);
        }
        let names = ConstantField::ALL.iter().map(|c| c.name().to_string()).collect();
        GridTensor::new(vec![self.height, self.width, 3], names, data).expect("consistent dims")
    }
}

pub fn gen_constant_fields(cfg: &SyntheticConfig) -> ConstantFields {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = stream_rng(cfg.seed, STREAM_CONSTANTS, 0);
    let anomaly = gaussian_field(h, w, 2.0 * cfg.length_scale, &mut rng);
    let altitude: Vec<f64> = anomaly.iter().map(|z| 500.0 + 400.0 * z).collect();
    let mut sorted = anomaly.clone();
    sorted.sort_by(f64::total_cmp);
    let n_sea = (cfg.sea_fraction * (h * w) as f64).round() as usize;
    let land: Vec<f64> = if n_sea == 0 {
        vec![1.0; h * w]
    } else {
        let cut = sorted[n_sea - 1];
        anomaly.iter().map(|&z| if z > cut { 1.0 } else { 0.0 }).collect()
    };
    let distance = coast_distance(&land, h, w);
    ConstantFields {
        height: h,
        width: w,
        altitude,
        altitude_anomaly: anomaly,
        land,
        distance,
    }
}

/// Distance to the nearest coastal cell (a land cell with a sea
/// 4-neighbour); coastal cells are exactly 0. Without any coast, the
/// distance to the grid edge is used instead.
pub fn coast_distance(land: &[f64], h: usize, w: usize) -> Vec<f64> {
    let is_land = |i: usize, j: usize| land[i * w + j] > 0.5;
    let mut coast = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !is_land(i, j) {
                continue;
            }
            let nb = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)];
            if nb.iter().any(|&(a, b)| a < h && b < w && !is_land(a, b)) {
                coast.push((i as f64, j as f64));
            }
        }
    }
    (0..h * w)
        .map(|ix| {
            let (i, j) = ((ix / w) as f64, (ix % w) as f64);
            if coast.is_empty() {
                return i.min(j).min((h - 1) as f64 - i).min((w - 1) as f64 - j);
            }
            coast
                .iter()
                .map(|&(a, b)| ((i - a).powi(2) + (j - b).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Truth parameters at one grid point from latents `z1`, `z2` and the
/// altitude anomaly `a`.
pub fn truth_at(family: Family, z1: f64, z2: f64, a: f64) -> Params {
    match family {
        Family::Gtcnd => Params::Gtcnd(
            GtcndParams::new(
                logistic(-0.4 - 1.5 * z1 - 0.4 * a),
                0.5 + 1.8 * z1 + 0.6 * a + 0.5 * z2,
                softplus(0.3 + 0.4 * z1 + 0.5 * z2) + 0.2,
            )
            .expect("truth map yields valid GTCND"),
        ),
        Family::Csgd => Params::Csgd(
            CsgdParams::new(
                softplus(0.2 + 0.4 * z1 + 0.3 * z2) + 0.3,
                softplus(0.5 + 0.6 * z1 + 0.2 * a) + 0.2,
                -(softplus(-0.2 - 0.9 * z1 - 0.3 * a) + 0.05),
            )
            .expect("truth map yields valid CSGD"),
        ),
    }
}

/// Latent fields of one day.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

pub fn gen_latent(cfg: &SyntheticConfig, day: usize) -> Latent {
    let mut rng = stream_rng(cfg.seed, STREAM_LATENT, day as u64);
    let z1 = gaussian_field(cfg.height, cfg.width, cfg.length_scale, &mut rng);
    let z2 = gaussian_field(cfg.height, cfg.width, cfg.length_scale, &mut rng);
    Latent { z1, z2 }
}

/// Truth parameter field `[H, W, 3]`.
pub fn gen_truth_params(cfg: &SyntheticConfig, constants: &ConstantFields, latent: &Latent) -> GridTensor {
    let n = cfg.height * cfg.width;
    let mut data = Vec::with_capacity(3 * n);
    for i in 0..n {
        let p = truth_at(cfg.family, latent.z1[i], latent.z2[i], constants.altitude_anomaly[i]);
        data.extend(p.triple());
    }
    let names = cfg.family.param_names().iter().map(|s| s.to_string()).collect();
    GridTensor::new(vec![cfg.height, cfg.width, 3], names, data).expect("consistent dims")
}

fn params_at(family: Family, t: &GridTensor, i: usize) -> Params {
    let d = &t.data()[3 * i..3 * i + 3];
    Params::from_triple(family, [d[0], d[1], d[2]]).expect("validated truth parameters")
}

/// One independent observation per grid point, `[H, W, 1]`.
pub fn sample_obs<R: Rng + ?Sized>(family: Family, truth: &GridTensor, rng: &mut R) -> GridTensor {
    let (h, w) = truth.spatial().expect("3-D truth");
    let data = (0..h * w).map(|i| params_at(family, truth, i).sample(rng)).collect();
    GridTensor::new(vec![h, w, 1], vec!["obs".into()], data).expect("consistent dims")
}

/// One member of the distorted precipitation ensemble.
///
/// GTCND: the point mass is kept, the location is shifted by `bias` and
/// the scale multiplied by `dispersion`. CSGD: the uncensored shifted
/// gamma `Y = δ + θZ` is shrunk about its mean `c = δ + kθ` and shifted,
/// `max(0, c + dispersion·(Y - c) + bias)`.
pub fn sample_raw_member<R: Rng + ?Sized>(p: &Params, bias: f64, dispersion: f64, rng: &mut R) -> f64 {
    match p {
        Params::Gtcnd(g) => {
            let d = GtcndParams::new(g.l, g.mu + bias, g.sigma * dispersion).expect("distortion keeps validity");
            d.sample(rng)
        }
        Params::Csgd(c) => {
            let z = Gamma::new(c.k, 1.0).expect("valid shape").sample(rng);
            let y = c.delta + c.theta * z;
            let center = c.delta + c.k * c.theta;
            (center + dispersion * (y - center) + bias).max(0.0)
        }
    }
}

/// Raw ensemble `[H, W, m]` of precipitation members.
pub fn sample_raw_ensemble<R: Rng + ?Sized>(cfg: &SyntheticConfig, truth: &GridTensor, rng: &mut R) -> GridTensor {
    let (h, w) = (cfg.height, cfg.width);
    let m = cfg.ensemble_size;
    let mut data = Vec::with_capacity(h * w * m);
    for i in 0..h * w {
        let p = params_at(cfg.family, truth, i);
        data.extend((0..m).map(|_| sample_raw_member(&p, cfg.bias, cfg.dispersion_factor, rng)));
    }
    let names = (0..m).map(|k| format!("m{k}")).collect();
    GridTensor::new(vec![h, w, m], names, data).expect("consistent dims")
}

/// `(mean, min, max, sd)` of one member vector; `sd` uses `m - 1`.
pub fn summarize(members: &[f64]) -> [f64; 4] {
    let m = members.len() as f64;
    let mean = members.iter().sum::<f64>() / m;
    let min = members.iter().copied().fold(f64::INFINITY, f64::min);
    let max = members.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let var = members.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
    [mean, min, max, var.sqrt()]
}

pub fn predictor_names(cfg: &SyntheticConfig) -> Vec<String> {
    let mut names = Vec::with_capacity(cfg.n_predictors());
    for v in 0..cfg.n_variables {
        let var = if v == 0 {
            "precip".to_string()
        } else {
            format!("aux{v}")
        };
        for stat in ["mean", "min", "max", "sd"] {
            names.push(format!("{var}_{stat}"));
        }
    }
    names.extend(cfg.constants.iter().map(|c| c.name().to_string()));
    names
}

/// Everything generated for one day.
#[derive(Debug, Clone, PartialEq)]
pub struct Day {
    pub truth: GridTensor,
    pub obs: GridTensor,
    pub raw: GridTensor,
    pub predictors: GridTensor,
}

pub fn gen_day(cfg: &SyntheticConfig, constants: &ConstantFields, day: usize) -> Day {
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let latent = gen_latent(cfg, day);
    let truth = gen_truth_params(cfg, constants, &latent);
    let obs = sample_obs(cfg.family, &truth, &mut stream_rng(cfg.seed, STREAM_OBS, day as u64));
    let mut raw_rng = stream_rng(cfg.seed, STREAM_RAW, day as u64);
    let raw = sample_raw_ensemble(cfg, &truth, &mut raw_rng);
    let m = cfg.ensemble_size;
    let d = cfg.n_predictors();
    let mut pred = vec![0.0; n * d];
    for i in 0..n {
        let s = summarize(&raw.data()[i * m..(i + 1) * m]);
        pred[i * d..i * d + 4].copy_from_slice(&s);
    }
    // Auxiliary variables: noisy views of the latents, alternating z1, z2.
    let mut aux = vec![0.0; m];
    for v in 1..cfg.n_variables {
        let z = if v % 2 == 1 { &latent.z1 } else { &latent.z2 };
        for i in 0..n {
            for a in aux.iter_mut() {
                *a = z[i] + 0.5 * raw_rng.sample::<f64, _>(StandardNormal);
            }
            let s = summarize(&aux);
            pred[i * d + 4 * v..i * d + 4 * v + 4].copy_from_slice(&s);
        }
    }
    for (c, kind) in cfg.constants.iter().enumerate() {
        let f = constants.field(*kind);
        for i in 0..n {
            pred[i * d + 4 * cfg.n_variables + c] = f[i];
        }
    }
    let predictors = GridTensor::new(vec![h, w, d], predictor_names(cfg), pred).expect("consistent dims");
    Day {
        truth,
        obs,
        raw,
        predictors,
    }
}

/// A generated dataset; tensors are stacked `[N, H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SyntheticConfig,
    pub constants: ConstantFields,
    pub predictors: GridTensor,
    pub observations: GridTensor,
    pub truth: GridTensor,
    pub raw: GridTensor,
    pub train_days: Vec<usize>,
    pub val_days: Vec<usize>,
    pub test_days: Vec<usize>,
}

/// Generates all days in parallel; the result does not depend on the
/// number of worker threads.
pub fn build_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let constants = gen_constant_fields(cfg);
    let days: Vec<Day> = (0..cfg.n_days)
        .into_par_iter()
        .map(|d| gen_day(cfg, &constants, d))
        .collect();
    let pick = |f: fn(&Day) -> &GridTensor| -> Result<GridTensor> {
        let v: Vec<GridTensor> = days.iter().map(|d| f(d).clone()).collect();
        GridTensor::stack(&v)
    };
    let (train_days, val_days, test_days) = cfg.split();
    Ok(Dataset {
        predictors: pick(|d| &d.predictors)?,
        observations: pick(|d| &d.obs)?,
        truth: pick(|d| &d.truth)?,
        raw: pick(|d| &d.raw)?,
        config: cfg.clone(),
        constants,
        train_days,
        val_days,
        test_days,
    })
}

pub const FILES: [(FileRole, &str); 6] = [
    (FileRole::Predictors, "predictors.gpt"),
    (FileRole::Observations, "observations.gpt"),
    (FileRole::Truth, "truth.gpt"),
    (FileRole::Raw, "raw.gpt"),
    (FileRole::Constants, "constants.gpt"),
    (FileRole::Mask, "mask.gpt"),
];

impl Dataset {
    /// Land points away from the border.
    pub fn censor_mask(&self) -> crate::verification::CensorMask {
        crate::verification::CensorMask::land_interior(
            &self.constants.land,
            self.config.height,
            self.config.width,
            self.config.mask_border,
        )
        .expect("consistent dims")
    }

    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mask = self.censor_mask();
        let mask_grid = GridTensor::new(
            vec![self.config.height, self.config.width, 1],
            vec!["include".into()],
            mask.include.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?;
        let constants = self.constants.to_grid();
        let tensors = [
            &self.predictors,
            &self.observations,
            &self.truth,
            &self.raw,
            &constants,
            &mask_grid,
        ];
        for ((_, name), t) in FILES.iter().zip(tensors) {
            dataio::write_grid(&dir.join(name), t, Dtype::F64)?;
        }
        let cfg_text = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let manifest = Manifest {
            name: format!(
                "synthetic-{}-{}x{}x{}",
                self.config.family, self.config.height, self.config.width, self.config.n_days
            ),
            family: self.config.family,
            config_hash: format!("{:016x}", dataio::fnv1a64(cfg_text.as_bytes())),
            train_days: self.train_days.clone(),
            val_days: self.val_days.clone(),
            test_days: self.test_days.clone(),
            files: FILES
                .iter()
                .map(|(role, name)| ManifestEntry {
                    role: *role,
                    path: name.to_string(),
                })
                .collect(),
        };
        manifest.write(dir)?;
        dataio::write_atomic(&dir.join("config.toml"), cfg_text.as_bytes())?;
        Ok(manifest)
    }
}
