//! Binary checkpoint: `AGGR`, u16 version, u32 metadata length, metadata
//! JSON (always holding the model config under `"aggregator"`), then one
//! record per tensor in layout order until end of file:
//! u16 name length, name, u8 rank, u32 dims, f32 values. Little endian.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::{Map, Value};

use super::params::AggregatorParams;
use super::{AggregatorConfig, ModelError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGGR";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: AggregatorParams<f32>,
    /// Free-form metadata object; `"aggregator"` is the model config.
    pub metadata: Value,
}

impl Checkpoint {
    /// `metadata` must be a JSON object or null; the config is inserted.
    pub fn new(params: AggregatorParams<f32>, metadata: Value) -> Result<Self> {
        let mut map = match metadata {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            _ => return Err(ModelError::Argument("checkpoint metadata must be a JSON object".into())),
        };
        let cfg = serde_json::to_value(params.config()).expect("config serializes");
        map.insert("aggregator".into(), cfg);
        Ok(Self { params, metadata: Value::Object(map) })
    }
}

fn fmt_err(msg: impl Into<String>) -> ModelError {
    ModelError::Format(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = serde_json::to_vec(&ckpt.metadata).expect("metadata serializes");
    let mut out = Vec::with_capacity(16 + meta.len() + 4 * ckpt.params.n_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u16::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
    out.extend_from_slice(&meta);
    for ((name, shape), data) in ckpt.params.layout().into_iter().zip(ckpt.params.tensors()) {
        out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u8(shape.len() as u8).unwrap();
        for d in shape {
            out.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &x in data {
            out.write_f32::<LittleEndian>(x).unwrap();
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Cursor::new(bytes);
    let trunc = |_| fmt_err("truncated checkpoint");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt_err("bad checkpoint magic"));
    }
    let version = r.read_u16::<LittleEndian>().map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(trunc)?;
    let metadata: Value = serde_json::from_slice(&meta).map_err(|e| fmt_err(format!("metadata: {e}")))?;
    let cfg_value = metadata.get("aggregator").ok_or_else(|| fmt_err("metadata lacks \"aggregator\""))?;
    let config: AggregatorConfig =
        serde_json::from_value(cfg_value.clone()).map_err(|e| fmt_err(format!("aggregator config: {e}")))?;
    config.validate()?;

    let mut params = AggregatorParams::<f32>::zeros(&config)?;
    let layout = params.layout();
    for ((name, shape), dst) in layout.iter().zip(params.tensors_mut()) {
        let name_len = r.read_u16::<LittleEndian>().map_err(trunc)? as usize;
        let mut buf = vec![0u8; name_len];
        r.read_exact(&mut buf).map_err(trunc)?;
        if buf != name.as_bytes() {
            return Err(fmt_err(format!("expected tensor {name}, found {}", String::from_utf8_lossy(&buf))));
        }
        let rank = r.read_u8().map_err(trunc)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<LittleEndian>().map_err(trunc)? as usize);
        }
        if &dims != shape {
            return Err(fmt_err(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        r.read_f32_into::<LittleEndian>(dst).map_err(trunc)?;
    }
    if (r.position() as usize) != bytes.len() {
        return Err(fmt_err("trailing bytes after last tensor"));
    }
    if !params.is_finite() {
        return Err(fmt_err("checkpoint holds non-finite values"));
    }
    Ok(Checkpoint { params, metadata })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|source| ModelError::Io { path: path.into(), source })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.into(), source })?;
    decode_checkpoint(&bytes)
}
