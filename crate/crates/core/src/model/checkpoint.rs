//! Checkpoint container.
//!
//! ```text
//! "CVAE" | version u32 | header_len u64 | header (JSON) | n_params u64 | n_params × f32
//! ```
//!
//! Little-endian throughout. Parameters follow the model's visit order. The
//! header carries no timestamps, so equal weights and configs give equal bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LossWeights, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Module;

pub const MAGIC: &[u8; 4] = b"CVAE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// sha256 of the canonical training configuration
    pub config_hash: String,
    /// training configuration as JSON, enough to resume
    pub train: serde_json::Value,
    /// master seed of the run; every random stream is derived from it
    pub seed: u64,
    /// number of training stages completed (0 = initialization)
    pub stage: u8,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model<f32>,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, w: &mut W) -> Result<()> {
    if ckpt.header.model != ckpt.model.config {
        return Err(Error::invalid("checkpoint header and model disagree on the configuration"));
    }
    let header = serde_json::to_vec(&ckpt.header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(ckpt.model.param_count() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(ckpt.model.param_count() * 4);
    ckpt.model.visit(&mut |p| {
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(ckpt, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, field: &str, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(field, "checkpoint truncated")
        } else {
            Error::Io(e)
        }
    })
}

fn read_u64<R: Read>(r: &mut R, field: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, field, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    read_exact(r, "magic", &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("magic", "not a checkpoint file"));
    }
    let mut v = [0u8; 4];
    read_exact(r, "version", &mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let len = read_u64(r, "header_len")? as usize;
    if len > 1 << 24 {
        return Err(Error::format("header_len", "implausibly large header"));
    }
    let mut header = vec![0u8; len];
    read_exact(r, "header", &mut header)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header).map_err(|e| Error::format("header", e.to_string()))?;
    header
        .model
        .validate()
        .map_err(|e| Error::format("header.model", e.to_string()))?;
    let mut model = Model::<f32>::new(header.model.clone(), 0)?;
    let n = read_u64(r, "n_params")? as usize;
    if n != model.param_count() {
        return Err(Error::format(
            "n_params",
            format!("{n} parameters stored, configuration needs {}", model.param_count()),
        ));
    }
    let mut raw = vec![0u8; n * 4];
    read_exact(r, "params", &mut raw)?;
    let mut values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    model.visit_mut(&mut |p| {
        for v in p.value.iter_mut() {
            *v = values.next().unwrap_or_default();
        }
    });
    Ok(Checkpoint { header, model })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
