//! Binary checkpoint container.
//!
//! Layout, all integers u32 little-endian:
//! magic `LPNET1`, config length + `key = value` text, parameter count, then
//! per parameter: name length, name, rank, dims, and f64 LE values.

use std::io::{Read, Write};
use std::path::Path;

use super::{ArchConfig, LpNet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"LPNET1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn write_checkpoint(model: &LpNet, out: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = model.config.to_kv();
    put_u32(&mut buf, cfg.len())?;
    buf.extend_from_slice(cfg.as_bytes());
    let store = &model.params;
    put_u32(&mut buf, store.len())?;
    for (name, t) in store.names().iter().zip(store.tensors()) {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Rebuilds the model from its config and overwrites every parameter by name.
pub fn read_checkpoint(input: &mut impl Read) -> Result<LpNet> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an LPNET1 checkpoint".into()));
    }
    let config = ArchConfig::from_kv(&c.string()?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = LpNet::new(config, 0)?;
    let count = c.u32()?;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, model expects {}",
            model.params.len()
        )));
    }
    let mut tensors = vec![None; count];
    for _ in 0..count {
        let name = c.string()?;
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        if shape != model.params.get(id).shape() {
            return Err(Error::Format(format!(
                "{name}: shape {shape:?}, expected {:?}",
                model.params.get(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let bytes = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors[id.index()] = Some(Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?);
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let tensors = tensors
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Format("duplicate parameter in checkpoint".into()))?;
    model.params.replace_all(tensors)?;
    Ok(model)
}

pub fn save_checkpoint(model: &LpNet, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LpNet> {
    read_checkpoint(&mut std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?,
    ))
}
