//! Versioned binary checkpoint.
//!
//! Layout (little-endian):
//! `"CMDA"`, version `u32`, vocab size `u32`, dtype `u8`, role `u8`, two role flags `u8`,
//! config digest (32 bytes), metadata count `u32` then `(key len u16, key, value u64)`,
//! record count `u32` then `(name len u32, name, rank u32, dims u64 x rank, values)`,
//! and finally a SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CMDA";
pub const VERSION: u32 = 1;

/// Which kind of model a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelRole {
    Nmt,
    /// Side and conditioning-mode codes of a masked language model.
    Cmlm { side: u8, mode: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub vocab_size: u32,
    pub role: ModelRole,
    pub digest: [u8; 32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub meta: BTreeMap<String, u64>,
    pub records: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.header.vocab_size.to_le_bytes());
        out.push(T::DTYPE.code());
        match self.header.role {
            ModelRole::Nmt => out.extend_from_slice(&[0, 0, 0]),
            ModelRole::Cmlm { side, mode } => out.extend_from_slice(&[1, side, mode]),
        }
        out.extend_from_slice(&self.header.digest);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                v.write_le(&mut out);
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    /// Parses a checkpoint, converting stored values to `T` if the file used the other precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 32 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checkpoint("checksum mismatch (corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let vocab_size = r.u32()?;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("bad dtype".into()))?;
        let role = match (r.u8()?, r.u8()?, r.u8()?) {
            (0, _, _) => ModelRole::Nmt,
            (1, side, mode) => ModelRole::Cmlm { side, mode },
            (k, _, _) => return Err(Error::Checkpoint(format!("unknown model role {k}"))),
        };
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let len = r.u16()? as usize;
            let key = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("bad key".into()))?;
            meta.insert(key, r.u64()?);
        }
        let mut records = Vec::new();
        for _ in 0..r.u32()? {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("bad name".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * dtype.width())?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw.chunks(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
            };
            records.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            header: CheckpointHeader { vocab_size, role, digest },
            meta,
            records,
        })
    }

    /// Writes through a temporary file and a rename, so readers never see a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Splits records into those under `prefix` (prefix stripped) and the rest.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let (hit, miss): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.records).into_iter().partition(|(n, _)| n.starts_with(prefix));
        self.records = miss;
        hit.into_iter().map(|(n, t)| (n[prefix.len()..].to_string(), t)).collect()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
