//! Binary checkpoint format, version 1. All integers and floats are
//! little-endian.
//!
//! ```text
//! magic      8 bytes  "MVITCKPT"
//! version    u32
//! config     u32 length + UTF-8 JSON of the model config
//! masking    u8       1 = masked, 0 = plain
//! step       u64      optimizer steps taken
//! n_params   u32
//! per parameter, in registration order:
//!   name     u32 length + UTF-8
//!   ndim     u32, then ndim x u64 dims
//!   values   u64 count + count x f64
//! adam_step  u64
//! per parameter: first moment (u64 count + f64s), then second moment
//! ```
//!
//! Gradients are not stored. Decoding then re-encoding yields the same bytes.

use std::path::Path;

use maskvit_core::hvit::{Masking, ModelCheckpoint, ModelConfig, CHECKPOINT_FORMAT_VERSION};
use maskvit_core::optim::AdamState;
use maskvit_core::tensor::{ParamStore, Tensor};

use crate::codec::{Reader, Writer};
use crate::error::{CliError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MVITCKPT";

pub fn encode_checkpoint(ck: &ModelCheckpoint) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION);
    let config = serde_json::to_vec(&ck.config).expect("model config serializes");
    w.bytes(&config);
    w.u8(u8::from(ck.masking.is_on()));
    w.u64(ck.step);
    w.u32(ck.params.len() as u32);
    for p in ck.params.iter() {
        w.bytes(p.name.as_bytes());
        w.u32(p.tensor.shape().len() as u32);
        for &d in p.tensor.shape() {
            w.u64(d as u64);
        }
        w.f64s(p.tensor.data());
    }
    w.u64(ck.optimizer.step);
    for m in &ck.optimizer.m {
        w.f64s(m);
    }
    for v in &ck.optimizer.v {
        w.f64s(v);
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint, String> {
    let (mut r, version) = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes()?).map_err(|e| e.to_string())?;
    config.validate().map_err(|e| e.to_string())?;
    let masking = match r.u8()? {
        0 => Masking::Off,
        1 => Masking::On,
        other => return Err(format!("bad masking byte {other}")),
    };
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let tensor = Tensor::new(dims, r.f64s()?).map_err(|e| format!("{name}: {e}"))?;
        params.add(name, tensor).map_err(|e| e.to_string())?;
    }
    let adam_step = r.u64()?;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(r.f64s()?);
    }
    for _ in 0..n {
        v.push(r.f64s()?);
    }
    r.finish()?;
    for (p, (m, v)) in params.iter().zip(m.iter().zip(&v)) {
        if m.len() != p.tensor.numel() || v.len() != p.tensor.numel() {
            return Err(format!("optimizer moments do not match {}", p.name));
        }
    }
    Ok(ModelCheckpoint {
        format_version: version,
        config,
        masking,
        step,
        params,
        optimizer: AdamState {
            step: adam_step,
            m,
            v,
        },
    })
}

pub fn save_checkpoint(path: &Path, ck: &ModelCheckpoint) -> Result<()> {
    crate::write_file(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|m| CliError::format(path, m))
}
