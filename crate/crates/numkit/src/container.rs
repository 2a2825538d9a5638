//! `CROSSPATH-W1` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        12 bytes  "CROSSPATH-W1"
//! meta_len     u32       length of the UTF-8 metadata blob (0 when absent)
//! meta         bytes
//! count        u32       number of tensors
//! per tensor, sorted by name:
//!   name_len   u32
//!   name       UTF-8 bytes
//!   ndim       u32
//!   dims       ndim × u64
//!   data       product(dims) × f64
//! ```
//!
//! Identical inputs always produce identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 12] = b"CROSSPATH-W1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: String,
    pub tensors: BTreeMap<String, Tensor>,
}

fn io_err(e: std::io::Error) -> NumError {
    NumError::Container(e.to_string())
}

impl Container {
    pub fn new(meta: impl Into<String>, tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            meta: meta.into(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC).map_err(io_err)?;
        write_u32(w, self.meta.len())?;
        w.write_all(self.meta.as_bytes()).map_err(io_err)?;
        write_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            write_u32(w, t.shape().len())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes()).map_err(io_err)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 12];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(NumError::Container("bad magic, not a CROSSPATH-W1 file".into()));
        }
        let meta_len = read_u32(r)?;
        let meta = String::from_utf8(read_bytes(r, meta_len)?)
            .map_err(|_| NumError::Container("metadata is not UTF-8".into()))?;
        let count = read_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)?;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|_| NumError::Container("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(r)?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io_err)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = read_bytes(r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { meta, tensors })
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NumError::Container("length exceeds u32".into()))?;
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf).map_err(io_err)?;
    if buf.len() != n {
        return Err(NumError::Container("truncated file".into()));
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_stable() {
        let c = Container::new(
            "",
            BTreeMap::from([("b".to_string(), Tensor::vector(vec![1.0]))]),
        );
        let bytes = c.to_bytes();
        let mut expected = MAGIC.to_vec();
        expected.extend(0u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"b");
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Container::from_bytes(b"NOT-A-WEIGHTS-FILE").is_err());
        let c = Container::new("m", BTreeMap::from([("w".to_string(), Tensor::zeros(&[4]))]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
