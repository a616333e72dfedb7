//! Checkpoint file: `b"MCCKPT\0\0"`, header length `u64` (LE), JSON header,
//! then a little-endian float32 blob. The header's tensor table gives each
//! tensor's name, shape and offset (in floats) into the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Layer, NetworkSpec, Parameters};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::provenance::Provenance;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MCCKPT\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub epoch: usize,
    pub validation_auc: Option<f64>,
    pub provenance: Option<Provenance>,
    pub params: Parameters<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    spec: NetworkSpec,
    epoch: usize,
    validation_auc: Option<f64>,
    provenance: Option<Provenance>,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.params.check(&ckpt.spec)?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in ckpt.params.named() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        spec: ckpt.spec.clone(),
        epoch: ckpt.epoch,
        validation_auc: ckpt.validation_auc,
        provenance: ckpt.provenance.clone(),
        tensors,
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format("checkpoint", format!("{}: {reason}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            artifact: format!("checkpoint {}", path.display()),
            found: header.schema_version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    header.spec.validate()?;
    let floats: Vec<f32> = body[hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if (body.len() - hlen) % 4 != 0 {
        return Err(bad("blob is not a whole number of float32 values"));
    }
    let mut tensors = header.tensors.iter().map(|e| {
        let len: usize = e.shape.iter().product();
        let end = e.offset + len;
        if end > floats.len() {
            return Err(bad(&format!("tensor {} runs past the blob", e.name)));
        }
        Tensor::new(&e.shape, floats[e.offset..end].to_vec())
    });
    let mut next_layer = || -> Result<Layer<f32>> {
        let weight = tensors.next().ok_or_else(|| bad("tensor table too short"))??;
        let bias = tensors.next().ok_or_else(|| bad("tensor table too short"))??;
        Ok(Layer { weight, bias })
    };
    let spec = header.spec;
    let mut streams = Vec::new();
    for _ in 0..spec.kind.streams() {
        streams.push((0..spec.stages()).map(|_| next_layer()).collect::<Result<Vec<_>>>()?);
    }
    let head = (0..spec.dense_units.len()).map(|_| next_layer()).collect::<Result<Vec<_>>>()?;
    let params = Parameters { streams, head };
    params.check(&spec)?;
    if params.count() != floats.len() {
        return Err(bad("blob size does not match the tensor table"));
    }
    Ok(Checkpoint {
        spec,
        epoch: header.epoch,
        validation_auc: header.validation_auc,
        provenance: header.provenance,
        params,
    })
}
