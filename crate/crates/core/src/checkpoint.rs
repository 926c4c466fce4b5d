//! Binary model checkpoints.
//!
//! Layout (little endian): the 8-byte magic `RLNCKPT1`, a `u32` format
//! version, the model configuration as `key = value` text (`u32` length
//! prefix), a `u32` parameter count, then per parameter its name (`u32`
//! length prefix), rank (`u32`), dims (`u64` each) and `f32` data. A trailing
//! `u64` FNV-1a hash covers every preceding byte.

use std::path::Path;

use crate::config::{parse_model, render_model};
use crate::error::{Error, Result};
use crate::model::{Model, Param};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RLNCKPT1";
pub const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(FNV_PRIME))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Argument(format!("{v} does not fit a checkpoint field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(model.count_params() * 4 + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &render_model(model.config()))?;
    put_u32(&mut out, model.params().len())?;
    for p in model.params() {
        put_str(&mut out, &p.name)?;
        put_u32(&mut out, p.tensor.rank())?;
        for d in p.tensor.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = fnv1a(&out);
    out.extend_from_slice(&hash.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(Error::Integrity("checkpoint checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = parse_model(&r.string()?)?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Format(format!("parameter '{name}' shape overflows")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(Param { name, tensor: Tensor::new(&shape, data)? });
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Model::from_params(&config, params)
}

pub fn save(path: &Path, model: &Model<f32>) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    decode(&std::fs::read(path)?)
}
