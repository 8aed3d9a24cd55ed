//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DALNETCK`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header (model config, caller
//! metadata and the ordered parameter table), then every parameter as
//! little-endian `f32` values in table order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{DalNet, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DALNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

pub fn save(path: &Path, model: &DalNet, meta: &serde_json::Value) -> Result<()> {
    let vars = model.params().vars();
    let header = Header {
        model: model.config().clone(),
        meta: meta.clone(),
        params: vars
            .iter()
            .map(|(name, v)| ParamEntry {
                name: name.clone(),
                shape: v.dims().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in vars.values() {
        let data = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for x in data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint into a freshly built `f32` model.
///
/// The parameter table must match the architecture implied by the stored
/// config name for name and shape for shape.
pub fn load(path: &Path, device: &Device) -> Result<(DalNet, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;

    let model = DalNet::new(header.model.clone(), 0, DType::F32, device)?;
    let vars = model.params().vars();
    if vars.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: file has {}, model expects {}",
            header.params.len(),
            vars.len()
        )));
    }
    for (entry, (name, var)) in header.params.iter().zip(vars) {
        if &entry.name != name || entry.shape != var.dims() {
            return Err(Error::Checkpoint(format!(
                "incompatible parameter {} {:?}, model expects {} {:?}",
                entry.name,
                entry.shape,
                name,
                var.dims()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        var.set(&Tensor::from_vec(data, entry.shape.as_slice(), device)?)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((model, header.meta))
}
