//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "USEG" | u32 version | u32 len, config text | u32 count |
//!   count × ( u16 len, name | u8 rank | rank × u32 dim | u8 dtype | data )
//! ```
//!
//! Parameters come first in registry order, followed by the batch-norm
//! running statistics as `<layer>.running_mean` / `<layer>.running_var`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Shape;

use super::config::ModelConfig;
use super::model::Model;

pub const MAGIC: [u8; 4] = *b"USEG";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: Shape, data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(4);
    for d in [shape.n, shape.c, shape.h, shape.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(DTYPE_F32);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let cfg = model.config().to_text();
    let mut out = Vec::with_capacity(64 + cfg.len() + 4 * model.param_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let count = model.params().len() + 2 * model.buffers().len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        put_tensor(&mut out, name, t.shape(), t.data());
    }
    for (name, s) in model.buffers().iter() {
        let shape = Shape::new(1, s.mean.len(), 1, 1);
        put_tensor(&mut out, &format!("{name}.running_mean"), shape, &s.mean);
        put_tensor(&mut out, &format!("{name}.running_var"), shape, &s.var);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<&'a str, CheckpointError> {
        core::str::from_utf8(self.take(n)?).map_err(|_| CheckpointError::Encoding)
    }
}

struct Entry {
    name: String,
    shape: Shape,
    data: Vec<f32>,
}

fn read_entry(r: &mut Reader<'_>) -> Result<Entry, CheckpointError> {
    let len = r.u16()? as usize;
    let name = String::from(r.str(len)?);
    let rank = r.u8()? as usize;
    if rank > 4 {
        return Err(CheckpointError::Mismatch(format!("`{name}` has rank {rank}")));
    }
    let mut dims = [1usize; 4];
    for i in 0..rank {
        dims[4 - rank + i] = r.u32()? as usize;
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(CheckpointError::UnsupportedDtype(dtype));
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let bytes = r.take(shape.len().checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Entry { name, shape, data })
}

/// Rebuilds the model from the embedded config and overwrites every tensor.
/// Any mismatch rejects the whole file.
pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = r.str(cfg_len)?;
    let config = ModelConfig::from_text(cfg_text).map_err(|e| match e {
        Error::Config(m) => CheckpointError::Mismatch(format!("embedded config: {m}")),
        other => CheckpointError::Mismatch(format!("{other}")),
    })?;
    let mut model = Model::build(&config, 0)?;
    let count = r.u32()? as usize;
    let expected = model.params().len() + 2 * model.buffers().len();
    if count != expected {
        return Err(CheckpointError::Mismatch(format!("{count} tensors, config implies {expected}")).into());
    }
    let mut seen = alloc::vec![false; expected];
    let n_params = model.params().len();
    for _ in 0..count {
        let e = read_entry(&mut r)?;
        let mismatch = |m: String| Error::Checkpoint(CheckpointError::Mismatch(m));
        if let Some(i) = model.params().index_of(&e.name) {
            let t = &mut model.params_mut().items_mut()[i];
            if t.shape() != e.shape {
                return Err(mismatch(format!("`{}` is {}, expected {}", e.name, e.shape, t.shape())));
            }
            t.data_mut().copy_from_slice(&e.data);
            seen[i] = true;
            continue;
        }
        let (layer, is_mean) = match (e.name.strip_suffix(".running_mean"), e.name.strip_suffix(".running_var")) {
            (Some(l), _) => (l, true),
            (_, Some(l)) => (l, false),
            _ => return Err(mismatch(format!("unknown tensor `{}`", e.name))),
        };
        let bi = model.buffers().index_of(layer).ok_or_else(|| mismatch(format!("unknown tensor `{}`", e.name)))?;
        let stats = &mut model.buffers_mut().items_mut()[bi];
        if e.shape != Shape::new(1, stats.mean.len(), 1, 1) {
            return Err(mismatch(format!("`{}` has shape {}", e.name, e.shape)));
        }
        if is_mean {
            stats.mean.copy_from_slice(&e.data);
        } else {
            stats.var.copy_from_slice(&e.data);
        }
        seen[n_params + 2 * bi + usize::from(!is_mean)] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CheckpointError::Mismatch(format!("tensor #{i} missing or duplicated")).into());
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Mismatch(format!("{} trailing bytes", buf.len() - r.pos)).into());
    }
    Ok(model)
}
