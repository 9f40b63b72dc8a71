//! Single-file checkpoint container: a plain-text header (magic, JSON
//! metadata, tensor directory) followed by raw little-endian f64 blobs.
//!
//! Layout, byte-exact:
//!
//! ```text
//! XSTA1\n
//! {json: config, vocab tokens, normalization stats, step, best_score}\n
//! <tensor count>\n
//! <name> f64 <dim0> <dim1> ... @<byte offset into data section>\n   (per tensor)
//! DATA\n
//! <8-byte little-endian f64 values, tensors concatenated in directory order>
//! ```
//!
//! Save followed by load reproduces every value bitwise.

use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::NormStats;
use crate::config::Config;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &str = "XSTA1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub norm: NormStats,
    pub step: u64,
    pub best_score: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: Config,
    vocab: Vec<String>,
    norm: NormStats,
    step: u64,
    best_score: f64,
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let ioerr = |e| Error::io(path.display().to_string(), e);
    let meta = Meta {
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.tokens.clone(),
        norm: ckpt.norm.clone(),
        step: ckpt.step,
        best_score: ckpt.best_score,
    };
    let meta_line = serde_json::to_string(&meta).map_err(|e| Error::Parse(e.to_string()))?;
    let mut f = std::fs::File::create(path).map_err(ioerr)?;
    writeln!(f, "{MAGIC}").map_err(ioerr)?;
    writeln!(f, "{meta_line}").map_err(ioerr)?;
    writeln!(f, "{}", ckpt.store.entries.len()).map_err(ioerr)?;
    let mut offset = 0usize;
    for (name, entry) in &ckpt.store.entries {
        let dims: Vec<String> = entry.shape.iter().map(|d| d.to_string()).collect();
        writeln!(f, "{name} f64 {} @{offset}", dims.join(" ")).map_err(ioerr)?;
        offset += entry.data.len() * 8;
    }
    writeln!(f, "DATA").map_err(ioerr)?;
    let mut buf = Vec::with_capacity(offset);
    for entry in ckpt.store.entries.values() {
        for v in &entry.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(ioerr)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let ioerr = |e| Error::io(path.display().to_string(), e);
    let mut f = std::fs::File::open(path).map_err(ioerr)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(ioerr)?;

    let mut pos = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<String> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse(format!("{}: truncated header", path.display())))?;
        let line = String::from_utf8(rest[..nl].to_vec())
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        pos += nl + 1;
        Ok(line)
    };

    if next_line(&bytes)? != MAGIC {
        return Err(Error::Parse(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let meta: Meta = serde_json::from_str(&next_line(&bytes)?)
        .map_err(|e| Error::Parse(format!("{}: metadata: {e}", path.display())))?;
    let count: usize = next_line(&bytes)?
        .parse()
        .map_err(|e| Error::Parse(format!("{}: tensor count: {e}", path.display())))?;

    struct Dir {
        name: String,
        shape: Vec<usize>,
        offset: usize,
    }
    let mut dir = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&bytes)?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty tensor line", path.display())))?
            .to_string();
        let dtype = parts.next().unwrap_or("");
        if dtype != "f64" {
            return Err(Error::Parse(format!(
                "{}: tensor {name}: unsupported dtype {dtype:?}",
                path.display()
            )));
        }
        let mut shape = Vec::new();
        let mut offset = None;
        for p in parts {
            if let Some(o) = p.strip_prefix('@') {
                offset = Some(o.parse::<usize>().map_err(|e| {
                    Error::Parse(format!("{}: tensor {name}: offset: {e}", path.display()))
                })?);
            } else {
                shape.push(p.parse::<usize>().map_err(|e| {
                    Error::Parse(format!("{}: tensor {name}: dim: {e}", path.display()))
                })?);
            }
        }
        let offset = offset
            .ok_or_else(|| Error::Parse(format!("{}: tensor {name}: no offset", path.display())))?;
        dir.push(Dir {
            name,
            shape,
            offset,
        });
    }
    if next_line(&bytes)? != "DATA" {
        return Err(Error::Parse(format!(
            "{}: missing DATA separator",
            path.display()
        )));
    }
    let data_start = pos;

    let mut store = ParamStore::new();
    for d in dir {
        let n: usize = d.shape.iter().product();
        let start = data_start + d.offset;
        let end = start + n * 8;
        let blob = bytes.get(start..end).ok_or_else(|| {
            Error::Parse(format!(
                "{}: tensor {}: data out of bounds",
                path.display(),
                d.name
            ))
        })?;
        let vals: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(d.name, vals, d.shape);
    }

    Ok(Checkpoint {
        config: meta.config,
        vocab: Vocab::from_tokens(meta.vocab),
        store,
        norm: meta.norm,
        step: meta.step,
        best_score: meta.best_score,
    })
}
