//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MOKA1"  endianness:u8 (0 = little)  precision:u8 (32 | 64)  count:u32
//! count x { name_len:u32  name:utf8  rank:u32  dims:u64 x rank  values }
//! checksum:u64   FNV-1a of every preceding byte
//! ```

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Precision, Scalar};

const MAGIC: &[u8; 5] = b"MOKA1";
const HEADER: usize = MAGIC.len() + 2 + 4;

fn fnv(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode<T: Scalar>(tensors: &[(String, Matrix<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(0);
    out.push(T::PRECISION.bits());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for &v in m.data() {
            v.write_le(&mut out);
        }
    }
    let sum = fnv(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Checks magic, endianness and checksum; returns the stored precision.
pub fn inspect(bytes: &[u8]) -> Result<Precision> {
    if bytes.len() < HEADER + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    if &body[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if body[MAGIC.len()] != 0 {
        return Err(Error::Checkpoint("only little-endian checkpoints are supported".into()));
    }
    match body[MAGIC.len() + 1] {
        32 => Ok(Precision::F32),
        64 => Ok(Precision::F64),
        b => Err(Error::Checkpoint(format!("unknown precision tag {b}"))),
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Matrix<T>)>> {
    let precision = inspect(bytes)?;
    if precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {precision:?} values, requested {:?}",
            T::PRECISION
        )));
    }
    let body = &bytes[..bytes.len() - 8];
    let mut r = Reader {
        bytes: body,
        pos: HEADER - 4,
    };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has rank {rank}, expected 2"
            )));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let raw = r.take(
            n.checked_mul(T::BYTES)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((name, Matrix::new(rows, cols, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, tensors: &[(String, Matrix<T>)]) -> Result<()> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<(String, Matrix<T>)>> {
    decode(&std::fs::read(path)?)
}
