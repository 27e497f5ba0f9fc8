//! Binary checkpoint format.
//!
//! ```text
//! magic "FMCK" | version u32 | meta_len u32 | meta (utf-8) | count u32
//! per parameter:
//!   name_len u32 | name | group u8 | trainable u8 | rank u32 | dims u32 * rank
//!   values f32 * product(dims)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::params::{ParamGroup, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore, meta: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.group.code());
        buf.push(u8::from(p.trainable));
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for d in p.value.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("invalid utf-8: {e}")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(ParamStore, String)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let group = ParamGroup::from_code(r.u8()?)?;
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        store.add(name, Tensor::new(shape, data)?, group, trainable)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok((store, meta))
}

pub fn write_checkpoint(path: &Path, store: &ParamStore, meta: &str) -> Result<()> {
    fs::write(path, encode_checkpoint(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
