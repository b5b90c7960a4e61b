//! Versioned binary checkpoint: magic, version, JSON header (network config,
//! epoch, optimizer hyper-parameters, caller metadata), then every tensor as
//! rank, dims and little-endian f32 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use crate::convnet::{ModelParams, NetworkConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MPOSECK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    epoch: usize,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    momentum: f64,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub epoch: usize,
    pub meta: serde_json::Value,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    put_u32(buf, t.shape().len());
    for &d in t.shape() {
        put_u32(buf, d);
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    optimizer: Option<&OptimizerState<T>>,
    epoch: usize,
    meta: &serde_json::Value,
) -> Result<Vec<u8>> {
    let header = Header {
        network: params.config().clone(),
        epoch,
        optimizer: optimizer.map(|s| OptimizerHeader {
            lr: s.lr,
            momentum: s.momentum,
            steps: s.steps,
        }),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize);
    put_u32(&mut buf, json.len());
    buf.extend_from_slice(&json);
    let tensors = params.tensors();
    put_u32(&mut buf, tensors.len());
    for t in tensors {
        put_tensor(&mut buf, t);
    }
    if let Some(s) = optimizer {
        for t in s.velocity.tensors() {
            put_tensor(&mut buf, t);
        }
    }
    Ok(buf)
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    optimizer: Option<&OptimizerState<T>>,
    epoch: usize,
    meta: &serde_json::Value,
) -> Result<()> {
    let bytes = encode_checkpoint(params, optimizer, epoch, meta)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Format(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("tensor size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("header: {e}")))?;
    let count = r.u32()?;
    let params = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_tensors(&header.network, params)
        .map_err(|e| Error::Format(e.to_string()))?;
    let optimizer = match header.optimizer {
        Some(h) => {
            let vel = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            Some(OptimizerState {
                lr: h.lr,
                momentum: h.momentum,
                velocity: ModelParams::from_tensors(&header.network, vel)
                    .map_err(|e| Error::Format(e.to_string()))?,
                steps: h.steps,
            })
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        epoch: header.epoch,
        meta: header.meta,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
