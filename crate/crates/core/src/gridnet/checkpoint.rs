//! Model checkpoints: an ASCII header describing the architecture and
//! tensor shapes, then every value as little-endian f64.
//!
//! ```text
//! GPNN1\n
//! family <gtcnd|csgd>\n
//! in_channels <d>\n
//! base_channels <c>\n
//! separable <0|1>\n
//! seed <u64>\n
//! scale_cap <none|value>\n
//! tensors <count>\n
//! tensor <name> <dim0> ... \n     (one line per tensor)
//! batch_norms <count>\n
//! end\n
//! <tensor values in order> <running mean, running var per layer> <input mean> <input std>
//! ```

use std::fs;
use std::path::Path;

use super::model::{UNet, UNetConfig};
use crate::dataio::{write_atomic, HeaderReader};
use crate::dist::Family;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "GPNN1";

pub fn encode_model(m: &UNet) -> Vec<u8> {
    let c = &m.config;
    let mut header = format!(
        "{CHECKPOINT_MAGIC}\nfamily {}\nin_channels {}\nbase_channels {}\nseparable {}\nseed {}\nscale_cap {}\ntensors {}\n",
        c.family,
        c.in_channels,
        c.base_channels,
        u8::from(c.use_separable),
        c.seed,
        c.scale_cap.map_or("none".to_string(), |v| v.to_string()),
        m.params.names.len()
    );
    for (name, shape) in m.params.names.iter().zip(&m.params.shapes) {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
    }
    header.push_str(&format!("batch_norms {}\nend\n", m.params.running.len()));
    let mut out = header.into_bytes();
    let values = m
        .params
        .values
        .iter()
        .flatten()
        .chain(m.params.running.iter().flat_map(|(a, b)| a.iter().chain(b)))
        .chain(&m.normalizer.mean)
        .chain(&m.normalizer.std);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_one<T: std::str::FromStr>(r: &mut HeaderReader, key: &str) -> Result<T> {
    let (off, parts) = r.keyed(key)?;
    match parts.as_slice() {
        [v] => v.parse().map_err(|_| r.err(off, format!("invalid {key} {v:?}"))),
        _ => Err(r.err(off, format!("expected one value for {key}, found {parts:?}"))),
    }
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<UNet> {
    let mut r = HeaderReader { bytes, pos: 0, path };
    let (off, magic) = r.line()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(r.err(off, format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}")));
    }
    let family: Family = parse_one(&mut r, "family")?;
    let in_channels: usize = parse_one(&mut r, "in_channels")?;
    let base_channels: usize = parse_one(&mut r, "base_channels")?;
    let separable: u8 = parse_one(&mut r, "separable")?;
    let seed: u64 = parse_one(&mut r, "seed")?;
    let cap_off = r.pos;
    let scale_cap = match parse_one::<String>(&mut r, "scale_cap")?.as_str() {
        "none" => None,
        v => Some(
            v.parse()
                .map_err(|_| r.err(cap_off, format!("invalid scale_cap {v:?}")))?,
        ),
    };
    let config = UNetConfig {
        in_channels,
        base_channels,
        family,
        use_separable: separable == 1,
        seed,
        scale_cap,
    };
    let mut model = UNet::new(config).map_err(|e| r.err(off, e.to_string()))?;
    let off = r.pos;
    let n_tensors: usize = parse_one(&mut r, "tensors")?;
    if n_tensors != model.params.names.len() {
        return Err(r.err(
            off,
            format!("{n_tensors} tensors, architecture has {}", model.params.names.len()),
        ));
    }
    for i in 0..n_tensors {
        let (off, parts) = r.keyed("tensor")?;
        let expect_name = &model.params.names[i];
        let expect_shape: Vec<String> = model.params.shapes[i].iter().map(|d| d.to_string()).collect();
        if parts.first() != Some(&expect_name.as_str())
            || parts[1..] != expect_shape.iter().map(String::as_str).collect::<Vec<_>>()[..]
        {
            return Err(r.err(
                off,
                format!("tensor {parts:?} does not match {expect_name} {expect_shape:?}"),
            ));
        }
    }
    let off = r.pos;
    let n_bn: usize = parse_one(&mut r, "batch_norms")?;
    if n_bn != model.params.running.len() {
        return Err(r.err(
            off,
            format!("{n_bn} batch norms, architecture has {}", model.params.running.len()),
        ));
    }
    let (off, end) = r.line()?;
    if end != "end" {
        return Err(r.err(off, format!("expected `end`, found {end:?}")));
    }
    let need = 8
        * (model.params.count()
            + model
                .params
                .running
                .iter()
                .map(|(a, b)| a.len() + b.len())
                .sum::<usize>()
            + 2 * in_channels);
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
    let mut it = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let targets = model
        .params
        .values
        .iter_mut()
        .flatten()
        .chain(
            model
                .params
                .running
                .iter_mut()
                .flat_map(|(a, b)| a.iter_mut().chain(b.iter_mut())),
        )
        .chain(model.normalizer.mean.iter_mut())
        .chain(model.normalizer.std.iter_mut());
    for slot in targets {
        *slot = it.next().expect("payload length checked");
    }
    Ok(model)
}

pub fn save_model(path: &Path, m: &UNet) -> Result<()> {
    write_atomic(path, &encode_model(m))
}

pub fn load_model(path: &Path) -> Result<UNet> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_model(&bytes, path)
}
