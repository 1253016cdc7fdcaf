//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "PCOCKPT1"
//! manifest     u64 length + UTF-8 JSON of the ModelConfig
//! count        u64 number of tensors
//! per tensor   u64 name length, UTF-8 name,
//!              u64 rank, rank x u64 extents,
//!              product(extents) x f64 payload
//! ```
//!
//! All integers and reals are little-endian. Tensors appear in canonical
//! parameter order.

use std::io::{Read, Write};

use super::{param_layout, ModelConfig, ModelError, ModelParams};
use crate::autodiff::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCOCKPT1";
const MAX_NAME: u64 = 1 << 16;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn put_u64(out: &mut impl Write, v: u64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn get_u64(input: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn get_string(input: &mut impl Read, len: u64) -> Result<String, CheckpointError> {
    let mut buf = vec![0u8; len as usize];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

pub fn write_checkpoint<T: Scalar>(mut out: impl Write, params: &ModelParams<T>) -> Result<(), CheckpointError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    let manifest = serde_json::to_vec(&params.config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    put_u64(&mut out, manifest.len() as u64)?;
    out.write_all(&manifest)?;
    let named = params.named_tensors();
    put_u64(&mut out, named.len() as u64)?;
    for (name, t) in named {
        put_u64(&mut out, name.len() as u64)?;
        out.write_all(name.as_bytes())?;
        put_u64(&mut out, t.shape().len() as u64)?;
        for &d in t.shape() {
            put_u64(&mut out, d as u64)?;
        }
        for &v in t.data() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(mut input: impl Read) -> Result<ModelParams<T>, CheckpointError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let manifest_len = get_u64(&mut input)?;
    if manifest_len > MAX_NAME {
        return Err(CheckpointError::Corrupt("manifest too large".into()));
    }
    let manifest = get_string(&mut input, manifest_len)?;
    let config: ModelConfig =
        serde_json::from_str(&manifest).map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
    config.validate()?;
    let layout = param_layout(&config);
    let count = get_u64(&mut input)?;
    if count != layout.len() as u64 {
        return Err(CheckpointError::Corrupt(format!("{count} tensors, layout expects {}", layout.len())));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for (expected_name, expected_shape) in layout {
        let name_len = get_u64(&mut input)?;
        if name_len > MAX_NAME {
            return Err(CheckpointError::Corrupt("tensor name too long".into()));
        }
        let name = get_string(&mut input, name_len)?;
        if name != expected_name {
            return Err(CheckpointError::Corrupt(format!("expected tensor {expected_name}, found {name}")));
        }
        let rank = get_u64(&mut input)?;
        if rank != expected_shape.len() as u64 {
            return Err(CheckpointError::Corrupt(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| get_u64(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != expected_shape {
            return Err(CheckpointError::Corrupt(format!("{name}: shape {shape:?}, expected {expected_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(ModelError::from)?);
    }
    Ok(ModelParams::from_tensors(config, tensors)?)
}
