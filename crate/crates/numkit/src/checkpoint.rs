//! Binary checkpoint: named tensors plus a free-form metadata string.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "NKCKPT\0\0"
//! version    u32       1
//! meta_len   u32
//! meta       meta_len bytes, UTF-8 (JSON by convention)
//! count      u32
//! count x {
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   ndim     u32
//!   dims     ndim x u64
//!   values   prod(dims) x f32
//! }
//! ```

use std::io::{Read, Write};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NKCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(&mut w, self.meta.as_bytes())?;
        w.write_all(&len_u32(self.entries.len())?.to_le_bytes())?;
        for (name, t) in &self.entries {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&len_u32(t.shape().len())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NumError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NumError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let meta = read_string(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Self { meta, entries })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| NumError::Checkpoint(format!("length {n} exceeds u32")))
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_all(&len_u32(b.len())?.to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| NumError::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::read_from(&b"NOTACKPT\x01\0\0\0"[..]).is_err());
        let ck = Checkpoint {
            meta: "{}".into(),
            entries: vec![("w".into(), Tensor::zeros(&[2, 2]))],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&buf[..]).is_err());
    }
}
