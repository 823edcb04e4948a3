//! Deterministic file formats: grid tensors, CSV reports, dataset manifests.
//!
//! # Grid file layout
//!
//! A grid file is an ASCII header followed immediately by the payload:
//!
//! ```text
//! GPT1\n
//! dims <d0> <d1> ... <dn>\n
//! dtype <f32|f64>\n
//! endian le\n
//! channels <name0> <name1> ... \n
//! end\n
//! <payload>
//! ```
//!
//! The last dim is the channel count and must match the number of channel
//! names (names contain no whitespace). The payload holds
//! `product(dims)` values, row-major, little-endian, with nothing after it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridTensor;
use crate::quantiles::QuantileForecast;

pub const MAGIC: &str = "GPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Serializes a grid in the documented layout. `F32` rounds each value to
/// nearest.
pub fn encode_grid(t: &GridTensor, dtype: Dtype) -> Result<Vec<u8>> {
    if let Some(c) = t
        .channels()
        .iter()
        .find(|c| c.is_empty() || c.chars().any(char::is_whitespace))
    {
        return Err(Error::Shape(format!(
            "channel name {c:?} is empty or contains whitespace"
        )));
    }
    let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
    let header = format!(
        "{MAGIC}\ndims {}\ndtype {}\nendian le\nchannels {}\nend\n",
        dims.join(" "),
        dtype.name(),
        t.channels().join(" ")
    );
    let mut out = Vec::with_capacity(header.len() + t.data().len() * dtype.size());
    out.extend_from_slice(header.as_bytes());
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    Ok(out)
}

pub(crate) struct HeaderReader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) path: &'a Path,
}

impl<'a> HeaderReader<'a> {
    pub(crate) fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    /// Next header line as `(offset, text)`.
    pub(crate) fn line(&mut self) -> Result<(usize, &'a str)> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let nl = rest
            .iter()
            .take(4096)
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err(start, "unterminated header line"))?;
        let text = std::str::from_utf8(&rest[..nl]).map_err(|_| self.err(start, "header is not valid UTF-8"))?;
        self.pos = start + nl + 1;
        Ok((start, text))
    }

    pub(crate) fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (off, text) = self.line()?;
        let mut parts = text.split(' ');
        if parts.next() != Some(key) {
            return Err(self.err(off, format!("expected `{key}` line, found {text:?}")));
        }
        Ok((off, parts.filter(|s| !s.is_empty()).collect()))
    }
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<GridTensor> {
    let mut r = HeaderReader { bytes, pos: 0, path };
    let (off, magic) = r.line()?;
    if magic != MAGIC {
        return Err(r.err(off, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let (off, dims_s) = r.keyed("dims")?;
    let dims = dims_s
        .iter()
        .map(|s| s.parse::<usize>().ok().filter(|&d| d > 0))
        .collect::<Option<Vec<_>>>()
        .filter(|d| !d.is_empty())
        .ok_or_else(|| r.err(off, format!("invalid dims {dims_s:?}")))?;
    let (off, dt) = r.keyed("dtype")?;
    let dtype = match dt.as_slice() {
        ["f32"] => Dtype::F32,
        ["f64"] => Dtype::F64,
        _ => return Err(r.err(off, format!("unsupported dtype {dt:?}"))),
    };
    let (off, en) = r.keyed("endian")?;
    if en.as_slice() != ["le"] {
        return Err(r.err(off, format!("unsupported endianness {en:?}")));
    }
    let (off, names) = r.keyed("channels")?;
    if names.len() != *dims.last().expect("nonempty") {
        return Err(r.err(
            off,
            format!("{} channel names for last dim {}", names.len(), dims.last().unwrap()),
        ));
    }
    let (off, end) = r.line()?;
    if end != "end" {
        return Err(r.err(off, format!("expected `end`, found {end:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| r.err(off, "dims overflow"))?;
    let need = count
        .checked_mul(dtype.size())
        .ok_or_else(|| r.err(off, "payload size overflow"))?;
    let payload = &bytes[r.pos..];
    if payload.len() < need {
        return Err(r.err(
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(r.err(
            r.pos + need,
            format!("{} trailing bytes after payload", payload.len() - need),
        ));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    GridTensor::new(dims, names.into_iter().map(String::from).collect(), data)
}

/// Writes via a temporary sibling file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_grid(path: &Path, t: &GridTensor, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode_grid(t, dtype)?)
}

pub fn read_grid(path: &Path) -> Result<GridTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}

/// `%.9g`-style rendering: 9 significant digits, no trailing zeros,
/// exponent form outside `[1e-5, 1e9)`.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mant.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
    Missing,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Real(x) => format_sig9(*x),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Missing, Cell::Real)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

/// A CSV report with a fixed column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Shape(format!(
                "row of {} cells for {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn write_report(path: &Path, table: &Table) -> Result<()> {
    write_atomic(path, table.to_csv().as_bytes())
}

/// Channel name carrying a quantile level. Rust's shortest round-trip
/// float formatting makes the level recoverable bit for bit.
pub fn level_channel(level: f64) -> String {
    format!("q{level}")
}

/// Packs per-point quantile forecasts sharing one level grid into a grid
/// with dims `lead ++ [n_levels]`.
pub fn quantiles_to_grid(forecasts: &[QuantileForecast], lead: &[usize]) -> Result<GridTensor> {
    let first = forecasts
        .first()
        .ok_or_else(|| Error::Shape("no quantile forecasts".into()))?;
    if lead.iter().product::<usize>() != forecasts.len() {
        return Err(Error::Shape(format!(
            "{} forecasts for leading dims {lead:?}",
            forecasts.len()
        )));
    }
    let levels = first.levels();
    if let Some(i) = forecasts.iter().position(|f| f.levels() != levels) {
        return Err(Error::Shape(format!("forecast {i} uses a different level grid")));
    }
    let mut dims = lead.to_vec();
    dims.push(levels.len());
    let data = forecasts.iter().flat_map(|f| f.values().iter().copied()).collect();
    GridTensor::new(dims, levels.iter().map(|&l| level_channel(l)).collect(), data)
}

/// Inverse of [`quantiles_to_grid`]; one forecast per leading index.
pub fn grid_to_quantiles(g: &GridTensor) -> Result<Vec<QuantileForecast>> {
    let levels: Arc<[f64]> = g
        .channels()
        .iter()
        .map(|c| {
            c.strip_prefix('q')
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Shape(format!("channel {c:?} is not a quantile level")))
        })
        .collect::<Result<Vec<_>>>()?
        .into();
    g.data()
        .chunks_exact(levels.len())
        .map(|v| QuantileForecast::new(levels.clone(), v.to_vec()))
        .collect()
}

/// Role of a file listed in a dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileRole {
    Predictors,
    Observations,
    Truth,
    Raw,
    Constants,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub role: FileRole,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub family: crate::dist::Family,
    pub config_hash: String,
    pub train_days: Vec<usize>,
    pub val_days: Vec<usize>,
    pub test_days: Vec<usize>,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl Manifest {
    pub fn file(&self, role: FileRole) -> Option<&str> {
        self.files.iter().find(|f| f.role == role).map(|f| f.path.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Reads `dir/manifest.toml` and checks every listed file parses.
    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            offset: e.span().map_or(0, |s| s.start as u64),
            reason: e.message().to_string(),
        })?;
        for f in &m.files {
            read_grid(&dir.join(&f.path))?;
        }
        Ok(m)
    }

    pub fn resolve(&self, dir: &Path, role: FileRole) -> Result<PathBuf> {
        self.file(role)
            .map(|p| dir.join(p))
            .ok_or_else(|| Error::Config(format!("manifest lists no {role:?} file")))
    }
}

/// 64-bit FNV-1a, used to fingerprint configs in manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
