//! Binary checkpoint container:
//!
//! ```text
//! "PHMD" | version u32 LE | header length u32 LE | JSON header | payload
//! ```
//!
//! The payload is raw little-endian f64: parameters, then Adam first
//! moments, then Adam second moments, each flattened in parameter order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{parameter_count, DenoiserConfig};
use crate::error::{Error, Result};
use crate::tensor::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PHMD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    /// Noise-prediction loss summed over levels.
    pub loss_eps: f64,
    /// Unweighted regularizer value per level, finest first.
    pub cgr: Vec<f64>,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub denoiser: DenoiserConfig,
    /// Training configuration as written by the trainer.
    pub train_config: serde_json::Value,
    pub params: Vec<f64>,
    /// Sizes of the parameter groups, in order.
    pub group_sizes: Vec<usize>,
    pub adam: AdamState,
    /// Master seed; every random stream is derived from it and the step.
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub loss_history: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    denoiser: DenoiserConfig,
    train_config: serde_json::Value,
    group_sizes: Vec<usize>,
    adam: AdamState,
    seed: u64,
    step: u64,
    epoch: usize,
    loss_history: Vec<LossRecord>,
    param_count: usize,
    payload_fnv1a64: String,
}

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.len();
        if self.group_sizes.iter().sum::<usize>() != n
            || self.adam.m.iter().map(Vec::len).sum::<usize>() != n
            || self.adam.v.iter().map(Vec::len).sum::<usize>() != n
        {
            return Err(Error::contract("checkpoint parameter and optimizer sizes disagree"));
        }
        let mut payload = Vec::with_capacity(3 * n * 8);
        let moments = self.adam.m.iter().chain(&self.adam.v).flatten();
        for v in self.params.iter().chain(moments) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let header = Header {
            denoiser: self.denoiser.clone(),
            train_config: self.train_config.clone(),
            group_sizes: self.group_sizes.clone(),
            adam: self.adam.clone(),
            seed: self.seed,
            step: self.step,
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            param_count: n,
            payload_fnv1a64: format!("{:016x}", fnv1a64(&payload)),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Numeric(format!("checkpoint header not serializable: {e}")))?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("missing PHMD magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Corrupt("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let n = header.param_count;
        let expected = parameter_count(&header.denoiser);
        if n != expected || header.group_sizes.iter().sum::<usize>() != n {
            return Err(Error::Corrupt(format!(
                "checkpoint stores {n} parameters, configuration implies {expected}"
            )));
        }
        let payload = &bytes[12 + hlen..];
        if payload.len() != 3 * n * 8 {
            return Err(Error::Corrupt(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                3 * n * 8
            )));
        }
        let digest = format!("{:016x}", fnv1a64(payload));
        if digest != header.payload_fnv1a64 {
            return Err(Error::Corrupt(format!(
                "payload digest {digest} does not match stored {}",
                header.payload_fnv1a64
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let split = |flat: &[f64]| {
            let mut out = Vec::with_capacity(header.group_sizes.len());
            let mut off = 0;
            for &s in &header.group_sizes {
                out.push(flat[off..off + s].to_vec());
                off += s;
            }
            out
        };
        let mut adam = header.adam;
        adam.m = split(&values[n..2 * n]);
        adam.v = split(&values[2 * n..]);
        Ok(Checkpoint {
            denoiser: header.denoiser,
            train_config: header.train_config,
            params: values[..n].to_vec(),
            group_sizes: header.group_sizes,
            adam,
            seed: header.seed,
            step: header.step,
            epoch: header.epoch,
            loss_history: header.loss_history,
        })
    }
}

/// Write atomically through a temporary sibling file.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
