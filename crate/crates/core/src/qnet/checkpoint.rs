//! Binary checkpoint format (little endian):
//!
//! ```text
//! magic "EFQN" | version u32 | input_dim u32 | hidden_dim u32 | blocks u32 | actions u32
//! layers u32 | (rows u32, cols u32) per layer | count u64 | count x f64
//! ```
//!
//! Values follow the in-memory layout: per layer, weights row-major then
//! bias. Parameters are always stored as f64.

use std::fs;
use std::path::Path;

use super::{Architecture, QNetwork};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EFQN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(net: &QNetwork<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn encode<T: Scalar>(net: &QNetwork<T>) -> Vec<u8> {
    let a = net.architecture();
    let shapes = a.layer_shapes();
    let mut out = Vec::with_capacity(64 + 8 * net.params().len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    for v in [CHECKPOINT_VERSION, a.input_dim as u32, a.hidden_dim as u32, a.num_blocks as u32, a.num_actions as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for (r, c) in shapes {
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_f64_lossy().to_le_bytes());
    }
    out
}

/// Load a checkpoint, optionally insisting on the number of actions.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected_actions: Option<usize>) -> Result<QNetwork<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected_actions)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8], expected_actions: Option<usize>) -> Result<QNetwork<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a Q-network checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let arch = Architecture {
        input_dim: r.u32()? as usize,
        hidden_dim: r.u32()? as usize,
        num_blocks: r.u32()? as usize,
        num_actions: r.u32()? as usize,
    };
    if let Some(l) = expected_actions {
        if l != arch.num_actions {
            return Err(Error::Shape(format!("checkpoint has {} actions, expected {l}", arch.num_actions)));
        }
    }
    let shapes = arch.layer_shapes();
    let layers = r.u32()? as usize;
    if layers != shapes.len() {
        return Err(Error::Format(format!("checkpoint lists {layers} layers, expected {}", shapes.len())));
    }
    for &(rows, cols) in &shapes {
        let (fr, fc) = (r.u32()? as usize, r.u32()? as usize);
        if (fr, fc) != (rows, cols) {
            return Err(Error::Format(format!("layer shape {fr}x{fc}, expected {rows}x{cols}")));
        }
    }
    let count = r.u64()? as usize;
    if count != arch.num_params() {
        return Err(Error::Format(format!("{count} parameters, expected {}", arch.num_params())));
    }
    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("parameter count overflow".into()))?)?;
    let data: Vec<T> = raw
        .chunks_exact(8)
        .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    QNetwork::from_parts(arch, data)
}
