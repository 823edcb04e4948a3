//! Batch pipeline behind the `precip-post` binary.
//!
//! Every command reads and writes files in the [`crate::dataio`] formats,
//! draws all randomness from explicit seeds and produces identical bytes
//! for identical inputs, whatever the worker count.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::datagen::{build_dataset, SyntheticConfig};
use crate::dataio::{
    grid_to_quantiles, quantiles_to_grid, read_grid, write_grid, write_report, Cell, Dtype, FileRole, Manifest, Table,
};
use crate::dist::Family;
use crate::error::{Error, Result};
use crate::fitting::{tail_extend, LevelSubset, TailConfig, TailStatus};
use crate::grid::GridTensor;
use crate::gridnet::checkpoint::{load_model, save_model};
use crate::gridnet::train::predict_params;
use crate::gridnet::{ensemble_quantiles, train_ensemble, TrainConfig, TrainData, TrainStatus, UNetConfig};
use crate::quantiles::{default_levels, QuantileForecast};
use crate::scoring::{crps_ensemble_fair, crps_from_quantiles};
use crate::verification::{
    crpss_map, jpz_test, observation_rank, rank_among, roc_curve, CensorMask, RankHistogram, N_CLASSES, N_RANKS,
};

/// Environment variable supplying the seed when `--seed` is absent.
pub const SEED_ENV: &str = "PRECIP_POST_SEED";
/// Environment variable supplying the worker count when `--workers` is absent.
pub const WORKERS_ENV: &str = "PRECIP_POST_WORKERS";

const CHECKPOINT_EXT: &str = "gpnn";
const QUANTILES_FILE: &str = "quantiles.gpt";
const SCORES_FILE: &str = "scores.gpt";
const MASK_FILE: &str = "mask.gpt";
const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Parser)]
#[command(
    name = "precip-post",
    version,
    about = "Statistical postprocessing of gridded precipitation forecasts"
)]
pub struct Cli {
    /// Overrides every seed in the config (and the PRECIP_POST_SEED variable).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: PRECIP_POST_WORKERS, else all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an ensemble of networks on a dataset's training days.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        models: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregated quantile forecasts for the test days.
    Predict {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parametric tail extension of quantile forecasts.
    FitTail {
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores, rank histograms and ROC curves on the test days.
    Verify {
        /// Quantile forecast grid; omit together with --raw to verify the raw ensemble.
        #[arg(long, required_unless_present = "raw", conflicts_with = "raw")]
        forecasts: Option<PathBuf>,
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        dataset: PathBuf,
        /// `[H, W, 1]` grid, nonzero where points count; defaults to the dataset mask.
        #[arg(long, conflicts_with = "no_mask")]
        mask: Option<PathBuf>,
        #[arg(long)]
        no_mask: bool,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary table and skill maps from verification outputs.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilySection {
    pub name: Option<Family>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LevelsSpec {
    Top(usize),
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailSection {
    pub activation_threshold: f64,
    pub activation_prob: f64,
    /// Either a count of top levels or explicit level indices.
    pub levels_to_update: LevelsSpec,
}

impl Default for TailSection {
    fn default() -> Self {
        let d = TailConfig::default();
        TailSection {
            activation_threshold: d.activation_threshold,
            activation_prob: d.activation_prob,
            levels_to_update: LevelsSpec::Top(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub n_models: usize,
    pub base_channels: usize,
    pub use_separable: bool,
    /// Optional upper bound on σ (GTCND) or θ (CSGD).
    pub scale_cap: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            clip_norm: t.clip_norm,
            n_models: t.n_models,
            base_channels: 8,
            use_separable: true,
            scale_cap: None,
        }
    }
}

impl TrainingSection {
    pub fn unet_config(&self, in_channels: usize, family: Family) -> UNetConfig {
        UNetConfig {
            in_channels,
            base_channels: self.base_channels,
            family,
            use_separable: self.use_separable,
            seed: self.seed,
            scale_cap: self.scale_cap,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            clip_norm: self.clip_norm,
            n_models: self.n_models,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationSection {
    pub thresholds: Vec<f64>,
    pub alpha: f64,
    /// Seed for breaking rank ties.
    pub seed: u64,
}

impl Default for VerificationSection {
    fn default() -> Self {
        VerificationSection {
            thresholds: vec![0.0, 5.0, 10.0, 20.0],
            alpha: 0.05,
            seed: 0,
        }
    }
}

/// The sectioned pipeline config. Every section and key is optional.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dataset: SyntheticConfig,
    pub family: FamilySection,
    pub tail: TailSection,
    pub training: TrainingSection,
    pub verification: VerificationSection,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Line of the `[name]` header, for errors about a whole section.
fn section_line(text: &str, name: &str) -> Option<usize> {
    let header = format!("[{name}]");
    text.lines().position(|l| l.trim() == header).map(|i| i + 1)
}

impl PipelineConfig {
    /// Parses and validates config text. Errors name `origin` and the line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let (line, col) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            Error::Config(format!("{origin}:{line}:{col}: {}", e.message().trim()))
        })?;
        let at = |section: &str, msg: String| {
            let line = section_line(text, section).unwrap_or(1);
            Error::Config(format!("{origin}:{line}: [{section}] {msg}"))
        };
        if let Some(f) = cfg.family.name {
            let explicit = toml::from_str::<toml::Table>(text)
                .ok()
                .and_then(|t| t.get("dataset").and_then(|d| d.get("family")).cloned());
            if explicit.is_some() && cfg.dataset.family != f {
                return Err(at(
                    "dataset",
                    format!("family {} contradicts [family] name {f}", cfg.dataset.family),
                ));
            }
            cfg.dataset.family = f;
        }
        cfg.dataset.validate().map_err(|e| at("dataset", message(&e)))?;
        cfg.tail_config().validate().map_err(|e| at("tail", message(&e)))?;
        cfg.training
            .train_config()
            .validate()
            .map_err(|e| at("training", message(&e)))?;
        cfg.training
            .unet_config(1, cfg.family())
            .validate()
            .map_err(|e| at("training", message(&e)))?;
        let v = &cfg.verification;
        if !(v.alpha > 0.0 && v.alpha < 1.0) {
            return Err(at("verification", format!("alpha must lie in (0,1), got {}", v.alpha)));
        }
        if v.thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(at(
                "verification",
                format!("thresholds must be finite and >= 0, got {:?}", v.thresholds),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, &p.display().to_string())
            }
            None => Ok(PipelineConfig::default()),
        }
    }

    pub fn family(&self) -> Family {
        self.dataset.family
    }

    pub fn tail_config(&self) -> TailConfig {
        TailConfig {
            family: self.family(),
            activation_threshold: self.tail.activation_threshold,
            activation_prob: self.tail.activation_prob,
            levels_to_update: match &self.tail.levels_to_update {
                LevelsSpec::Top(n) => LevelSubset::Top(*n),
                LevelsSpec::Indices(v) => LevelSubset::Indices(v.clone()),
            },
        }
    }

    /// Replaces every seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.training.seed = seed;
        self.verification.seed = seed;
    }
}

/// Process exit status for an error: 1 for invalid input, 2 for failures
/// while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Format { .. } | Error::Shape(_) => 1,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Domain(_) => "domain",
        Error::Shape(_) => "shape",
        Error::Quadrature { .. } => "quadrature",
        Error::Fit(_) => "fit",
        Error::Divergence { .. } => "divergence",
        Error::InvalidPoint { .. } => "invalid-point",
        Error::Format { .. } => "format",
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
    }
}

/// Error text without the kind prefix that `error_line` already carries.
fn message(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        e => e.to_string(),
    }
}

/// Single-line `precip-post: error[kind]: message`.
pub fn error_line(kind: &str, msg: &str) -> String {
    format!(
        "precip-post: error[{kind}]: {}",
        msg.split_whitespace().collect::<Vec<_>>().join(" ")
    )
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &message(&e)));
            exit_code(&e)
        }
    }
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>> {
    match std::env::var(name) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("environment variable {name}={v:?} is not valid"))),
        Err(_) => Ok(None),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = match cli.workers {
        Some(w) => Some(w),
        None => env_parse::<usize>(WORKERS_ENV)?,
    };
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::Config("worker count must be >= 1".into()));
        }
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let seed = match cli.seed {
        Some(s) => Some(s),
        None => env_parse::<u64>(SEED_ENV)?,
    };
    let load = |p: &Option<PathBuf>| -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(p.as_deref())?;
        if let Some(s) = seed {
            cfg.set_seed(s);
        }
        Ok(cfg)
    };
    match cli.command {
        Command::Datagen { config, out } => cmd_datagen(&load(&config)?, &out),
        Command::Train {
            dataset,
            config,
            models,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(n) = models {
                cfg.training.n_models = n;
            }
            cmd_train(&dataset, &cfg, config.is_some(), &out)
        }
        Command::Predict {
            checkpoints,
            dataset,
            out,
        } => cmd_predict(&checkpoints, &dataset, &out),
        Command::FitTail { forecasts, config, out } => cmd_fit_tail(&forecasts, &load(&config)?, &out),
        Command::Verify {
            forecasts,
            raw: _,
            dataset,
            mask,
            no_mask,
            thresholds,
            alpha,
            config,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(t) = thresholds {
                cfg.verification.thresholds = t;
            }
            if let Some(a) = alpha {
                cfg.verification.alpha = a;
            }
            let mask = match (mask, no_mask) {
                (_, true) => MaskChoice::All,
                (Some(p), _) => MaskChoice::File(p),
                (None, false) => MaskChoice::Dataset,
            };
            cmd_verify(forecasts.as_deref(), &dataset, &mask, &cfg.verification, &out)
        }
        Command::Report {
            reports,
            reference,
            out,
        } => cmd_report(&reports, reference.as_deref(), &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_datagen(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let ds = build_dataset(&cfg.dataset)?;
    ds.write(out)?;
    Ok(())
}

/// A dataset directory with its manifest.
struct DatasetDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl DatasetDir {
    fn open(dir: &Path) -> Result<Self> {
        Ok(DatasetDir {
            dir: dir.to_path_buf(),
            manifest: Manifest::read(dir)?,
        })
    }

    fn grid(&self, role: FileRole) -> Result<GridTensor> {
        read_grid(&self.manifest.resolve(&self.dir, role)?)
    }

    /// Days `days` of a `[N, ...]` grid.
    fn days(g: &GridTensor, days: &[usize]) -> Result<GridTensor> {
        let samples = days.iter().map(|&d| g.sample(d)).collect::<Result<Vec<_>>>()?;
        GridTensor::stack(&samples)
    }
}

fn checkpoint_name(i: usize) -> String {
    format!("model_{i:02}.{CHECKPOINT_EXT}")
}

pub fn cmd_train(dataset: &Path, cfg: &PipelineConfig, explicit_config: bool, out: &Path) -> Result<()> {
    let ds = DatasetDir::open(dataset)?;
    let family = ds.manifest.family;
    if explicit_config && cfg.family.name.is_some_and(|f| f != family) {
        return Err(Error::Config(format!(
            "config family {} does not match dataset family {family}",
            cfg.family()
        )));
    }
    let predictors = ds.grid(FileRole::Predictors)?;
    let observations = ds.grid(FileRole::Observations)?;
    let mask = read_mask(&ds.grid(FileRole::Mask)?)?;
    let data = TrainData {
        predictors: &predictors,
        observations: &observations,
        train_days: &ds.manifest.train_days,
        val_days: &ds.manifest.val_days,
        mask: Some(&mask.include),
    };
    let ucfg = cfg.training.unet_config(predictors.n_channels(), family);
    let results = train_ensemble(&data, &ucfg, &cfg.training.train_config())?;
    create_dir(out)?;
    let mut history = Table::new(&["model", "epoch", "train_loss", "val_loss"]);
    let mut status = Table::new(&["model", "status", "best_epoch", "epochs_run", "reason"]);
    let mut diverged = None;
    for (i, r) in results.iter().enumerate() {
        save_model(&out.join(checkpoint_name(i)), &r.model)?;
        for h in &r.history {
            history.push(vec![i.into(), h.epoch.into(), h.train_loss.into(), h.val_loss.into()])?;
        }
        let (name, reason) = match &r.status {
            TrainStatus::Completed => ("completed", String::new()),
            TrainStatus::Diverged { epoch, reason } => {
                diverged.get_or_insert((i, *epoch, reason.clone()));
                ("diverged", reason.clone())
            }
        };
        status.push(vec![
            i.into(),
            name.into(),
            r.best_epoch.into(),
            r.history.len().into(),
            Cell::Text(reason),
        ])?;
    }
    write_report(&out.join("history.csv"), &history)?;
    write_report(&out.join("training.csv"), &status)?;
    match diverged {
        Some((i, epoch, reason)) => Err(Error::Divergence {
            epoch,
            reason: format!("model {i}: {reason}"),
        }),
        None => Ok(()),
    }
}

fn read_mask(g: &GridTensor) -> Result<CensorMask> {
    let (h, w) = g.spatial()?;
    if g.cells() != h * w {
        return Err(Error::Shape(format!("mask must be HxWx1, got {:?}", g.dims())));
    }
    Ok(CensorMask {
        height: h,
        width: w,
        include: g.data().iter().map(|&v| v != 0.0).collect(),
    })
}

fn load_checkpoints(dir: &Path) -> Result<Vec<crate::gridnet::UNet>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == CHECKPOINT_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .{CHECKPOINT_EXT} checkpoints in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_model(p)).collect()
}

pub fn cmd_predict(checkpoints: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let ds = DatasetDir::open(dataset)?;
    let models = load_checkpoints(checkpoints)?;
    let family = ds.manifest.family;
    if let Some(m) = models.iter().find(|m| m.config.family != family) {
        return Err(Error::Config(format!(
            "checkpoint family {} does not match dataset family {family}",
            m.config.family
        )));
    }
    let predictors = ds.grid(FileRole::Predictors)?;
    let x = DatasetDir::days(&predictors, &ds.manifest.test_days)?;
    let (h, w) = (x.dims()[1], x.dims()[2]);
    let n = ds.manifest.test_days.len();
    let forecasts = ensemble_quantiles(&models, &x, default_levels())?;
    let mut params = Vec::with_capacity(models.len() * n * h * w * 3);
    for m in &models {
        params.extend(predict_params(m, &x, 8)?.data);
    }
    let names = family.param_names().iter().map(|s| s.to_string()).collect();
    let params = GridTensor::new(vec![models.len(), n, h, w, 3], names, params)?;
    create_dir(out)?;
    write_grid(
        &out.join(QUANTILES_FILE),
        &quantiles_to_grid(&forecasts, &[n, h, w])?,
        Dtype::F64,
    )?;
    write_grid(&out.join("params.gpt"), &params, Dtype::F64)
}

pub fn cmd_fit_tail(forecasts: &Path, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let grid = read_grid(forecasts)?;
    let lead = grid.dims()[..grid.dims().len() - 1].to_vec();
    let tail = cfg.tail_config();
    let outcomes = grid_to_quantiles(&grid)?
        .iter()
        .map(|q| tail_extend(q, &tail))
        .collect::<Result<Vec<_>>>()?;
    let (mut inactive, mut extended, mut failed, mut raised) = (0usize, 0usize, 0usize, 0usize);
    for o in &outcomes {
        match &o.status {
            TailStatus::Inactive { .. } => inactive += 1,
            TailStatus::Extended { updated, .. } => {
                extended += 1;
                raised += updated;
            }
            TailStatus::FitFailed(_) => failed += 1,
        }
    }
    let extended_q: Vec<QuantileForecast> = outcomes.into_iter().map(|o| o.forecast).collect();
    create_dir(out)?;
    write_grid(
        &out.join(QUANTILES_FILE),
        &quantiles_to_grid(&extended_q, &lead)?,
        Dtype::F64,
    )?;
    let mut t = Table::new(&[
        "family",
        "points",
        "inactive",
        "extended",
        "fit_failed",
        "levels_raised",
    ]);
    t.push(vec![
        tail.family.name().into(),
        extended_q.len().into(),
        inactive.into(),
        extended.into(),
        failed.into(),
        raised.into(),
    ])?;
    write_report(&out.join("tail_summary.csv"), &t)
}

pub enum MaskChoice {
    Dataset,
    File(PathBuf),
    All,
}

/// Forecasts for the test days, indexed by `day * cells + cell`.
enum Forecasts {
    Quantiles(Vec<QuantileForecast>),
    Ensemble { members: Vec<f64>, m: usize },
}

impl Forecasts {
    fn crps(&self, i: usize, y: f64) -> Result<f64> {
        match self {
            Forecasts::Quantiles(q) => Ok(crps_from_quantiles(&q[i], y)),
            Forecasts::Ensemble { members, m } => crps_ensemble_fair(&members[i * m..(i + 1) * m], y),
        }
    }

    fn n_ranks(&self) -> usize {
        match self {
            Forecasts::Quantiles(_) => N_RANKS,
            Forecasts::Ensemble { m, .. } => m + 1,
        }
    }

    fn rank(&self, i: usize, y: f64, rng: &mut ChaCha8Rng) -> usize {
        match self {
            Forecasts::Quantiles(q) => observation_rank(&q[i], y, rng),
            Forecasts::Ensemble { members, m } => {
                let mut v = members[i * m..(i + 1) * m].to_vec();
                v.sort_by(f64::total_cmp);
                rank_among(&v, y, rng)
            }
        }
    }

    fn exceedance(&self, i: usize, t: f64) -> f64 {
        match self {
            Forecasts::Quantiles(q) => q[i].exceedance(t),
            Forecasts::Ensemble { members, m } => {
                members[i * m..(i + 1) * m].iter().filter(|&&v| v > t).count() as f64 / *m as f64
            }
        }
    }
}

fn threshold_label(t: f64) -> String {
    crate::dataio::format_sig9(t)
}

pub fn cmd_verify(
    forecasts: Option<&Path>,
    dataset: &Path,
    mask: &MaskChoice,
    v: &crate::cli::VerificationSection,
    out: &Path,
) -> Result<()> {
    let ds = DatasetDir::open(dataset)?;
    let days = &ds.manifest.test_days;
    let obs = DatasetDir::days(&ds.grid(FileRole::Observations)?, days)?;
    let (h, w) = (obs.dims()[1], obs.dims()[2]);
    let cells = h * w;
    let fc = match forecasts {
        Some(p) => {
            let g = read_grid(p)?;
            let want = [days.len(), h, w];
            if g.dims().len() != 4 || g.dims()[..3] != want {
                return Err(Error::Shape(format!(
                    "forecast grid {:?} does not cover test days {want:?}",
                    g.dims()
                )));
            }
            Forecasts::Quantiles(grid_to_quantiles(&g)?)
        }
        None => {
            let raw = DatasetDir::days(&ds.grid(FileRole::Raw)?, days)?;
            let m = raw.n_channels();
            Forecasts::Ensemble {
                members: raw.into_data(),
                m,
            }
        }
    };
    let mask = match mask {
        MaskChoice::All => CensorMask::all(h, w),
        MaskChoice::Dataset => read_mask(&ds.grid(FileRole::Mask)?)?,
        MaskChoice::File(p) => read_mask(&read_grid(p)?)?,
    };
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::Shape(format!(
            "mask is {}x{}, grid is {h}x{w}",
            mask.height, mask.width
        )));
    }
    if !(v.alpha > 0.0 && v.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0,1), got {}", v.alpha)));
    }

    let y = obs.data();
    let mut score_sum = vec![0.0; cells];
    let mut rng = ChaCha8Rng::seed_from_u64(v.seed);
    let mut ranks = Vec::new();
    let mut probs: Vec<Vec<f64>> = vec![Vec::new(); v.thresholds.len()];
    let mut events: Vec<Vec<bool>> = vec![Vec::new(); v.thresholds.len()];
    for d in 0..days.len() {
        for c in 0..cells {
            let i = d * cells + c;
            score_sum[c] += fc.crps(i, y[i])?;
            if !mask.include[c] {
                continue;
            }
            ranks.push(fc.rank(i, y[i], &mut rng));
            for (k, &t) in v.thresholds.iter().enumerate() {
                probs[k].push(fc.exceedance(i, t));
                events[k].push(y[i] > t);
            }
        }
    }
    let scores: Vec<f64> = score_sum.iter().map(|s| s / days.len() as f64).collect();
    let scores = GridTensor::new(vec![h, w, 1], vec!["crps".into()], scores)?;
    let cmap = crpss_map(&scores, &scores, &mask)?;

    create_dir(out)?;
    write_grid(&out.join(SCORES_FILE), &scores, Dtype::F64)?;
    let mask_grid = GridTensor::new(
        vec![h, w, 1],
        vec!["include".into()],
        mask.include.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    write_grid(&out.join(MASK_FILE), &mask_grid, Dtype::F64)?;
    let mut map = Table::new(&["row", "col", "included", "crps"]);
    for (c, s) in scores.data().iter().enumerate() {
        map.push(vec![
            (c / w).into(),
            (c % w).into(),
            mask.include[c].into(),
            (*s).into(),
        ])?;
    }
    write_report(&out.join("crps_map.csv"), &map)?;

    let mut summary = Table::new(&["metric", "value"]);
    summary.push(vec![
        "forecast".into(),
        (if forecasts.is_some() {
            "quantiles"
        } else {
            "raw_ensemble"
        })
        .into(),
    ])?;
    summary.push(vec!["test_days".into(), days.len().into()])?;
    summary.push(vec!["points".into(), ranks.len().into()])?;
    summary.push(vec!["mean_crps".into(), cmap.masked_mean_score.into()])?;

    let hist = RankHistogram::from_ranks(&ranks, fc.n_ranks(), N_CLASSES)?;
    let mut ht = Table::new(&["class", "count", "frequency"]);
    for (k, &cnt) in hist.counts.iter().enumerate() {
        ht.push(vec![
            (k + 1).into(),
            cnt.into(),
            (cnt as f64 / hist.n_total as f64).into(),
        ])?;
    }
    write_report(&out.join("rank_histogram.csv"), &ht)?;
    let jpz = jpz_test(&hist, v.alpha)?;
    let mut jt = Table::new(&["component", "projection", "chi2", "p_value", "p_adjusted"]);
    for (name, comp) in [("bias", jpz.bias), ("dispersion", jpz.dispersion), ("wave", jpz.wave)] {
        jt.push(vec![
            name.into(),
            comp.projection.into(),
            comp.chi2.into(),
            comp.p_value.into(),
            comp.p_adjusted.into(),
        ])?;
    }
    write_report(&out.join("jpz.csv"), &jt)?;
    summary.push(vec!["jpz_alpha".into(), v.alpha.into()])?;
    summary.push(vec!["jpz_reject_flatness".into(), jpz.reject_flatness.into()])?;

    for (k, &t) in v.thresholds.iter().enumerate() {
        let label = threshold_label(t);
        let mut rt = Table::new(&["probability_threshold", "false_alarm_rate", "hit_rate"]);
        let auc = match roc_curve(&probs[k], &events[k]) {
            Ok(roc) => {
                rt.push(vec![Cell::Missing, 0.0.into(), 0.0.into()])?;
                for (p, thr) in roc.points[1..].iter().zip(&roc.thresholds) {
                    rt.push(vec![(*thr).into(), p.0.into(), p.1.into()])?;
                }
                Cell::Real(roc.auc)
            }
            // No events (or no non-events) above this threshold.
            Err(Error::Domain(_)) => Cell::Missing,
            Err(e) => return Err(e),
        };
        write_report(&out.join(format!("roc_t{label}.csv")), &rt)?;
        summary.push(vec![format!("auc_t{label}").as_str().into(), auc])?;
    }
    write_report(&out.join(SUMMARY_FILE), &summary)
}

/// `metric -> value` pairs of a verification summary, in file order.
fn read_summary(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("metric,value") {
        return Err(Error::Format {
            path,
            offset: 0,
            reason: "expected header `metric,value`".into(),
        });
    }
    let mut out = Vec::new();
    let mut offset = "metric,value\n".len();
    for line in lines {
        let (k, v) = line.split_once(',').ok_or_else(|| Error::Format {
            path: path.clone(),
            offset: offset as u64,
            reason: format!("malformed summary line {line:?}"),
        })?;
        out.push((k.to_string(), v.to_string()));
        offset += line.len() + 1;
    }
    Ok(out)
}

fn report_name(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn cmd_report(reports: &[PathBuf], reference: Option<&Path>, out: &Path) -> Result<()> {
    let summaries = reports.iter().map(|r| read_summary(r)).collect::<Result<Vec<_>>>()?;
    let reference_scores = reference.map(|r| read_grid(&r.join(SCORES_FILE))).transpose()?;
    let keys: Vec<String> = summaries[0].iter().map(|(k, _)| k.clone()).collect();
    let mut columns = vec!["report", "crpss"];
    columns.extend(keys.iter().map(String::as_str));
    let mut table = Table::new(&columns);
    create_dir(out)?;
    for (dir, summary) in reports.iter().zip(&summaries) {
        let name = report_name(dir);
        let crpss = match &reference_scores {
            Some(rs) => {
                let scores = read_grid(&dir.join(SCORES_FILE))?;
                let mask = read_mask(&read_grid(&dir.join(MASK_FILE))?)?;
                let map = crpss_map(&scores, rs, &mask)?;
                let mut mt = Table::new(&["row", "col", "included", "score", "score_ref", "skill"]);
                for c in 0..map.scores.len() {
                    mt.push(vec![
                        (c / map.width).into(),
                        (c % map.width).into(),
                        mask.include[c].into(),
                        map.scores[c].into(),
                        map.scores_ref[c].into(),
                        map.skill[c].into(),
                    ])?;
                }
                write_report(&out.join(format!("crpss_map_{name}.csv")), &mt)?;
                map.masked_skill.into()
            }
            None => Cell::Missing,
        };
        let values: BTreeMap<&str, &str> = summary.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let mut row = vec![Cell::Text(name), crpss];
        row.extend(keys.iter().map(|k| {
            values
                .get(k.as_str())
                .map_or(Cell::Missing, |v| Cell::Text(v.to_string()))
        }));
        table.push(row)?;
    }
    write_report(&out.join(SUMMARY_FILE), &table)
}
