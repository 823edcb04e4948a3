use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{crps_loss_raw, link_point};
use super::model::{Mode, Normalizer, UNet, UNetConfig};
use super::tensor::Tensor4;
use crate::dist::{Censored, Params};
use crate::error::{Error, Result};
use crate::grid::GridTensor;
use crate::quantiles::QuantileForecast;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub n_models: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            clip_norm: None,
            n_models: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.n_models == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, epochs and n_models must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Predictors `[N, H, W, d]`, observations `[N, H, W, 1]` and the day split.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub predictors: &'a GridTensor,
    pub observations: &'a GridTensor,
    pub train_days: &'a [usize],
    pub val_days: &'a [usize],
    /// Loss mask over one `H×W` grid.
    pub mask: Option<&'a [bool]>,
}

impl TrainData<'_> {
    fn shape(&self) -> Result<(usize, usize, usize, usize)> {
        let p = self.predictors.dims();
        if p.len() != 4 {
            return Err(Error::Shape(format!("predictors must be 4-D, got {p:?}")));
        }
        let (n, h, w, d) = (p[0], p[1], p[2], p[3]);
        if self.observations.data().len() != n * h * w {
            return Err(Error::Shape(format!(
                "observations dims {:?} do not match predictors {p:?}",
                self.observations.dims()
            )));
        }
        if let Some(&bad) = self.train_days.iter().chain(self.val_days).find(|&&i| i >= n) {
            return Err(Error::Shape(format!("day {bad} out of range for {n} days")));
        }
        if self.train_days.is_empty() {
            return Err(Error::Config("no training days".into()));
        }
        Ok((n, h, w, d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Training stopped at `epoch`; the returned model is the last finite
    /// checkpoint.
    Diverged {
        epoch: usize,
        reason: String,
    },
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Checkpoint with the lowest validation loss (training loss when there
    /// are no validation days).
    pub model: UNet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub status: TrainStatus,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[Vec<f64>]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let lr_t = lr * (1.0 - ADAM_BETA2.powi(self.t)).sqrt() / (1.0 - ADAM_BETA1.powi(self.t));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr_t * m[i] / (v[i].sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Copies whole days out of a `[N, ...]` buffer with `per_day` values each.
fn gather(data: &[f64], days: &[usize], per_day: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(days.len() * per_day);
    for &d in days {
        out.extend_from_slice(&data[d * per_day..(d + 1) * per_day]);
    }
    out
}

struct Batches<'a> {
    x: &'a [f64],
    y: &'a [f64],
    h: usize,
    w: usize,
    d: usize,
}

impl Batches<'_> {
    fn get(&self, days: &[usize]) -> (Tensor4, Vec<f64>) {
        let cells = self.h * self.w;
        let x = Tensor4 {
            n: days.len(),
            h: self.h,
            w: self.w,
            c: self.d,
            data: gather(self.x, days, cells * self.d),
        };
        (x, gather(self.y, days, cells))
    }
}

fn grad_norm(g: &[Vec<f64>]) -> f64 {
    g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean loss in inference mode over `days`, weighted by unmasked points.
fn evaluate(model: &UNet, batches: &Batches, days: &[usize], batch_size: usize, mask: Option<&[bool]>) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in days.chunks(batch_size) {
        let (x, y) = batches.get(chunk);
        let n = chunk.len() * mask.map_or(batches.h * batches.w, |m| m.iter().filter(|&&b| b).count());
        let (tape, out, _) = model.forward_raw(x, Mode::Infer)?;
        let (loss, _) = crps_loss_raw(tape.value(out), &y, mask, model.config.link())?;
        total += loss * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Trains one network with Adam on shuffled mini-batches. Input channels
/// are standardized with statistics of the training days.
pub fn train(data: &TrainData, unet: &UNetConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let (_, h, w, d) = data.shape()?;
    if unet.in_channels != d {
        return Err(Error::Config(format!(
            "model expects {} input channels, data has {d}",
            unet.in_channels
        )));
    }
    let cells = h * w;
    let normalizer = Normalizer::fit(&gather(data.predictors.data(), data.train_days, cells * d), d);
    let mut x_all = data.predictors.data().to_vec();
    normalizer.apply(&mut x_all);
    let batches = Batches {
        x: &x_all,
        y: data.observations.data(),
        h,
        w,
        d,
    };

    let mut model = UNet::new(unet.clone())?;
    model.normalizer = normalizer;
    let mut adam = Adam::new(&model.params.values);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = data.train_days.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();
    let mut best: Option<(f64, usize, UNet)> = None;
    let mut status = TrainStatus::Completed;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut days = chunk.to_vec();
            days.sort_unstable();
            let (x, y) = batches.get(&days);
            let step = (|| -> Result<_> {
                let (tape, out, stats) = model.forward_raw(x, Mode::Train)?;
                let (loss, seed) = crps_loss_raw(tape.value(out), &y, data.mask, unet.link())?;
                Ok((loss, tape.backward(out, &seed), stats))
            })();
            let (loss, mut grads, stats) = match step {
                Ok(s) => s,
                Err(e @ (Error::InvalidPoint { .. } | Error::Domain(_))) => {
                    status = TrainStatus::Diverged {
                        epoch,
                        reason: e.to_string(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let norm = grad_norm(&grads);
            if !loss.is_finite() || !norm.is_finite() {
                status = TrainStatus::Diverged {
                    epoch,
                    reason: format!("non-finite loss {loss} or gradient norm {norm}"),
                };
                break 'epochs;
            }
            if let Some(c) = cfg.clip_norm {
                if norm > c {
                    grads.iter_mut().flatten().for_each(|g| *g *= c / norm);
                }
            }
            adam.step(&mut model.params.values, &grads, cfg.learning_rate);
            model.update_running(&stats);
            let n = days.len() * data.mask.map_or(cells, |m| m.iter().filter(|&&b| b).count());
            total += loss * n as f64;
            count += n;
        }
        if !model.params.is_finite() {
            status = TrainStatus::Diverged {
                epoch,
                reason: "non-finite parameters".into(),
            };
            break;
        }
        let train_loss = total / count as f64;
        let val_loss = if data.val_days.is_empty() {
            None
        } else {
            match evaluate(&model, &batches, data.val_days, cfg.batch_size, data.mask) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(v) => {
                    status = TrainStatus::Diverged {
                        epoch,
                        reason: format!("non-finite validation loss {v}"),
                    };
                    break;
                }
                Err(e @ (Error::InvalidPoint { .. } | Error::Domain(_))) => {
                    status = TrainStatus::Diverged {
                        epoch,
                        reason: e.to_string(),
                    };
                    break;
                }
                Err(e) => return Err(e),
            }
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.clone()));
        }
        last_good = model.clone();
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (last_good, 0),
    };
    Ok(TrainResult {
        model,
        history,
        best_epoch,
        status,
    })
}

/// Seed of ensemble member `i`.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains `cfg.n_models` networks that differ only in initialization and
/// batch order. Results are independent of the thread count.
pub fn train_ensemble(data: &TrainData, unet: &UNetConfig, cfg: &TrainConfig) -> Result<Vec<TrainResult>> {
    cfg.validate()?;
    (0..cfg.n_models)
        .into_par_iter()
        .map(|i| {
            let s = member_seed(cfg.seed, i);
            let u = UNetConfig {
                seed: s,
                ..unet.clone()
            };
            train(
                data,
                &u,
                &TrainConfig {
                    seed: s.rotate_left(17),
                    ..cfg.clone()
                },
            )
        })
        .collect()
}

/// Parameter fields `[N, H, W, 3]` from one model for raw predictors.
pub fn predict_params(model: &UNet, x: &GridTensor, batch_size: usize) -> Result<Tensor4> {
    let dims = x.dims();
    if dims.len() != 4 {
        return Err(Error::Shape(format!("predictors must be 4-D, got {dims:?}")));
    }
    let (n, h, w, d) = (dims[0], dims[1], dims[2], dims[3]);
    let per_day = h * w * d;
    let mut out = Vec::with_capacity(n * h * w * 3);
    let days: Vec<usize> = (0..n).collect();
    for chunk in days.chunks(batch_size.max(1)) {
        let t = Tensor4::new(chunk.len(), h, w, d, gather(x.data(), chunk, per_day))?;
        let raw = model.predict_raw(t)?;
        for px in raw.data.chunks_exact(3) {
            out.extend(link_point(model.config.link(), [px[0], px[1], px[2]]).0);
        }
    }
    Tensor4::new(n, h, w, 3, out)
}

/// Combines member forecasts by averaging their quantiles at each level.
/// Returns one forecast per grid point in `[N, H, W]` order.
pub fn ensemble_quantiles(models: &[UNet], x: &GridTensor, levels: Arc<[f64]>) -> Result<Vec<QuantileForecast>> {
    if models.is_empty() {
        return Err(Error::Config("empty model ensemble".into()));
    }
    let fields = models
        .iter()
        .map(|m| predict_params(m, x, 8))
        .collect::<Result<Vec<_>>>()?;
    let points = fields[0].pixels();
    let scale = 1.0 / models.len() as f64;
    (0..points)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; levels.len()];
            for (f, m) in fields.iter().zip(models) {
                let t = [f.data[3 * i], f.data[3 * i + 1], f.data[3 * i + 2]];
                let p = Params::from_triple(m.config.family, t).map_err(|e| Error::InvalidPoint {
                    index: i,
                    reason: e.to_string(),
                })?;
                for (a, v) in acc.iter_mut().zip(p.quantiles(&levels)?) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a *= scale);
            QuantileForecast::new(levels.clone(), acc)
        })
        .collect()
}
