//! Versioned binary container of named tensors.
//!
//! Layout (little-endian): magic `HMNN`, version `u32`, scalar width `u8`,
//! architecture as JSON (`u32` length + bytes), tensor count `u32`, then per
//! tensor: name (`u32` length + UTF-8), rank `u32`, dims `u64` each, raw values.

use std::path::Path;

use super::network::{Arch, Param, Params};
use super::real::Real;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HMNN";
const VERSION: u32 = 1;

pub fn encode<T: Real>(params: &Params<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::TAG);
    let arch = serde_json::to_vec(params.arch()).expect("architecture serializes");
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode<T: Real>(buf: &[u8]) -> Result<Params<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a network checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let tag = r.take(1)?[0];
    if tag != T::TAG {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {tag}-byte scalars, expected {}",
            T::TAG
        )));
    }
    let n = r.u32()? as usize;
    let arch: Arch = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Checkpoint(format!("bad architecture: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::Checkpoint(format!("shape overflow in {name}")))?;
        let bytes = r.take(
            len.checked_mul(T::BYTES)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.push(Param { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Params::from_tensors(&arch, tensors)
}

pub fn save<T: Real>(params: &Params<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Params<T>> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Arch {
            num_classes: 5,
            ..Arch::default()
        };
        let mut p = Params::<f32>::init(&arch, 9).unwrap();
        p.tensors_mut()[1].data[0] = -0.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save(&p, &path).unwrap();
        let q: Params<f32> = load(&path).unwrap();
        assert_eq!(encode(&q), encode(&p));
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert!(a
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_corruption() {
        let p = Params::<f64>::init(&Arch::default(), 1).unwrap();
        let bytes = encode(&p);
        assert!(decode::<f32>(&bytes).is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
    }
}
