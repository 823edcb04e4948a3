use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{Link, PARAM_FLOOR};
use super::tape::{BatchStats, Tape, Var};
use super::tensor::Tensor4;
use crate::dist::Family;
use crate::error::{Error, Result};

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub family: Family,
    #[serde(default = "default_true")]
    pub use_separable: bool,
    #[serde(default)]
    pub seed: u64,
    /// Upper bound on σ (GTCND) or θ (CSGD), e.g. a climatological maximum.
    #[serde(default)]
    pub scale_cap: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl UNetConfig {
    pub fn new(in_channels: usize, base_channels: usize, family: Family, seed: u64) -> Self {
        UNetConfig {
            in_channels,
            base_channels,
            family,
            use_separable: true,
            seed,
            scale_cap: None,
        }
    }

    /// Fixed at two levels.
    pub fn depth(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!(
                "in_channels and base_channels must be >= 1, got {} and {}",
                self.in_channels, self.base_channels
            )));
        }
        if let Some(c) = self.scale_cap {
            if !(c.is_finite() && c > PARAM_FLOOR) {
                return Err(Error::Config(format!(
                    "scale_cap must be finite and > {PARAM_FLOOR}, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn link(&self) -> Link {
        Link {
            family: self.family,
            scale_cap: self.scale_cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One convolution block's parameter indices.
#[derive(Debug, Clone, Copy)]
struct Block {
    /// Depthwise kernel (separable) or full 3×3 kernel.
    k3: usize,
    /// Pointwise kernel (separable only).
    k1: Option<usize>,
    gamma: usize,
    beta: usize,
    /// Index into the running-statistics buffers.
    bn: usize,
    c_out: usize,
}

/// Named learnable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
    /// Running `(mean, var)` per batch-norm layer.
    pub running: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ModelParams {
    pub fn count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
            && self
                .running
                .iter()
                .all(|(m, v)| m.iter().chain(v).all(|x| x.is_finite()))
    }
}

/// Per-channel input standardization fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(c: usize) -> Self {
        Normalizer {
            mean: vec![0.0; c],
            std: vec![1.0; c],
        }
    }

    /// Channel statistics of `data` laid out with `c` channels innermost.
    /// Constant channels get unit scale.
    pub fn fit(data: &[f64], c: usize) -> Self {
        let n = (data.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for px in data.chunks_exact(c) {
            mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for px in data.chunks_exact(c) {
            for ch in 0..c {
                var[ch] += (px[ch] - mean[ch]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n).sqrt())
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, x: &mut [f64]) {
        let c = self.mean.len();
        for px in x.chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = (px[ch] - self.mean[ch]) / self.std[ch];
            }
        }
    }
}

/// The two-level distributional regression U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ModelParams,
    pub normalizer: Normalizer,
}

struct Layout {
    enc1: Block,
    enc2: Block,
    bott: Block,
    dec2: Block,
    dec1: Block,
    head_k: usize,
    head_b: usize,
}

fn layout(cfg: &UNetConfig) -> Layout {
    let c = cfg.base_channels;
    let mut p = 0usize;
    let mut bn = 0usize;
    let mut block = |_c_in: usize, c_out: usize| {
        let k3 = p;
        p += 1;
        let k1 = if cfg.use_separable {
            p += 1;
            Some(p - 1)
        } else {
            None
        };
        let b = Block {
            k3,
            k1,
            gamma: p,
            beta: p + 1,
            bn,
            c_out,
        };
        p += 2;
        bn += 1;
        b
    };
    let d = cfg.in_channels;
    let enc1 = block(d, c);
    let enc2 = block(c, 2 * c);
    let bott = block(2 * c, 4 * c);
    let dec2 = block(4 * c + 2 * c, 2 * c);
    let dec1 = block(2 * c + c, c);
    Layout {
        enc1,
        enc2,
        bott,
        dec2,
        dec1,
        head_k: p,
        head_b: p + 1,
    }
}

impl UNet {
    /// Fresh model with fan-in-scaled uniform kernels, unit BN scales and
    /// zero offsets and head bias.
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.base_channels;
        let d = config.in_channels;
        let mut names = Vec::new();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let mut values = Vec::new();
        let mut running = Vec::new();
        let mut uniform = |shape: Vec<usize>,
                           fan_in: usize,
                           name: String,
                           names: &mut Vec<String>,
                           shapes: &mut Vec<Vec<usize>>,
                           values: &mut Vec<Vec<f64>>| {
            let n: usize = shape.iter().product();
            let limit = (6.0 / fan_in as f64).sqrt();
            values.push((0..n).map(|_| rng.random_range(-limit..limit)).collect());
            shapes.push(shape);
            names.push(name);
        };
        let blocks = [
            ("enc1", d, c),
            ("enc2", c, 2 * c),
            ("bott", 2 * c, 4 * c),
            ("dec2", 6 * c, 2 * c),
            ("dec1", 3 * c, c),
        ];
        for (name, c_in, c_out) in blocks {
            if config.use_separable {
                uniform(
                    vec![3, 3, c_in],
                    9,
                    format!("{name}.depthwise"),
                    &mut names,
                    &mut shapes,
                    &mut values,
                );
                uniform(
                    vec![c_in, c_out],
                    c_in,
                    format!("{name}.pointwise"),
                    &mut names,
                    &mut shapes,
                    &mut values,
                );
            } else {
                uniform(
                    vec![3, 3, c_in, c_out],
                    9 * c_in,
                    format!("{name}.conv"),
                    &mut names,
                    &mut shapes,
                    &mut values,
                );
            }
            names.push(format!("{name}.bn_scale"));
            shapes.push(vec![c_out]);
            values.push(vec![1.0; c_out]);
            names.push(format!("{name}.bn_offset"));
            shapes.push(vec![c_out]);
            values.push(vec![0.0; c_out]);
            running.push((vec![0.0; c_out], vec![1.0; c_out]));
        }
        uniform(
            vec![c, 3],
            c,
            "head.kernel".into(),
            &mut names,
            &mut shapes,
            &mut values,
        );
        names.push("head.bias".into());
        shapes.push(vec![3]);
        values.push(vec![0.0; 3]);
        let params = ModelParams {
            names,
            shapes,
            values,
            running,
        };
        let normalizer = Normalizer::identity(d);
        Ok(UNet {
            config,
            params,
            normalizer,
        })
    }

    /// Spatial dims after zero padding to a multiple of 4.
    pub fn padded_dims(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(4) * 4, w.div_ceil(4) * 4)
    }

    fn block(&self, tape: &mut Tape, x: Var, b: Block, mode: Mode, stats: &mut Vec<(usize, BatchStats)>) -> Var {
        let conv = match b.k1 {
            Some(k1) => {
                let dw = tape.depthwise(x, b.k3);
                tape.pointwise(dw, k1, None, b.c_out)
            }
            None => tape.conv3(x, b.k3, b.c_out),
        };
        let normed = match mode {
            Mode::Train => {
                let (v, s) = tape.batch_norm(conv, b.gamma, b.beta);
                stats.push((b.bn, s));
                v
            }
            Mode::Infer => {
                let (m, v) = &self.params.running[b.bn];
                tape.batch_norm_infer(conv, b.gamma, b.beta, m, v)
            }
        };
        tape.relu(normed)
    }

    /// Records the forward pass of already-normalized input and returns the
    /// raw 3-channel output (before the link) plus the batch statistics of
    /// each batch-norm layer in training mode.
    pub fn forward_raw<'p>(&'p self, x: Tensor4, mode: Mode) -> Result<(Tape<'p>, Var, Vec<(usize, BatchStats)>)> {
        if x.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        let l = layout(&self.config);
        let (h, w) = (x.h, x.w);
        let (ph, pw) = Self::padded_dims(h, w);
        let mut tape = Tape::new(&self.params.values);
        let mut stats = Vec::new();
        let inp = tape.input(x);
        let inp = tape.pad_to(inp, ph, pw);
        let s1 = self.block(&mut tape, inp, l.enc1, mode, &mut stats);
        let p1 = tape.max_pool(s1)?;
        let s2 = self.block(&mut tape, p1, l.enc2, mode, &mut stats);
        let p2 = tape.max_pool(s2)?;
        let bott = self.block(&mut tape, p2, l.bott, mode, &mut stats);
        let u2 = tape.upsample(bott);
        let c2 = tape.concat(u2, s2)?;
        let d2 = self.block(&mut tape, c2, l.dec2, mode, &mut stats);
        let u1 = tape.upsample(d2);
        let c1 = tape.concat(u1, s1)?;
        let d1 = self.block(&mut tape, c1, l.dec1, mode, &mut stats);
        let head = tape.pointwise(d1, l.head_k, Some(l.head_b), 3);
        let out = tape.crop_to(head, h, w);
        Ok((tape, out, stats))
    }

    /// Standardizes raw predictors with the model's normalizer.
    pub fn normalize(&self, mut x: Tensor4) -> Tensor4 {
        self.normalizer.apply(&mut x.data);
        x
    }

    /// Raw network output for raw (unnormalized) predictors.
    pub fn predict_raw(&self, x: Tensor4) -> Result<Tensor4> {
        let (tape, out, _) = self.forward_raw(self.normalize(x), Mode::Infer)?;
        Ok(tape.value(out).clone())
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[(usize, BatchStats)]) {
        for (bn, s) in stats {
            let (m, v) = &mut self.params.running[*bn];
            for ch in 0..m.len() {
                m[ch] = BN_MOMENTUM * m[ch] + (1.0 - BN_MOMENTUM) * s.mean[ch];
                v[ch] = BN_MOMENTUM * v[ch] + (1.0 - BN_MOMENTUM) * s.var[ch];
            }
        }
    }
}
