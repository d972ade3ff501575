//! Binary tensor container shared by checkpoints and dataset files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RLT1" | version u32 | count u32 |
//!   count × { name_len u16 | name | dtype u8 | ndim u8 | dims u64 × ndim | payload }
//! ```
//!
//! dtype 0 is `f64`, 1 is `f32`, 2 is raw bytes (used for JSON blobs).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RLT1";
pub const VERSION: u32 = 1;
pub const DTYPE_BYTES: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry<S> {
    Tensor(Tensor<S>),
    Blob(Vec<u8>),
}

/// Ordered named entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<S> {
    entries: Vec<(String, Entry<S>)>,
}

impl<S: Scalar> Default for Container<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Container<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.entries.push((name.into(), Entry::Tensor(t)));
    }

    pub fn push_blob(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.entries.push((name.into(), Entry::Blob(bytes)));
    }

    pub fn entries(&self) -> &[(String, Entry<S>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find_map(|(n, e)| match e {
            Entry::Tensor(t) if n == name => Some(t),
            _ => None,
        })
    }

    pub fn blob(&self, name: &str) -> Option<&[u8]> {
        self.entries.iter().find_map(|(n, e)| match e {
            Entry::Blob(b) if n == name => Some(b.as_slice()),
            _ => None,
        })
    }

    pub fn into_tensors(self) -> impl Iterator<Item = (String, Tensor<S>)> {
        self.entries.into_iter().filter_map(|(n, e)| match e {
            Entry::Tensor(t) => Some((n, t)),
            Entry::Blob(_) => None,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| Error::Format("too many entries".into()))?.to_le_bytes());
        for (name, entry) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{name}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(S::DTYPE);
                    out.push(u8::try_from(t.ndim()).map_err(|_| Error::Format(format!("`{name}` has too many axes")))?);
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for &x in t.data() {
                        x.write_le(&mut out);
                    }
                }
                Entry::Blob(b) => {
                    out.push(DTYPE_BYTES);
                    out.push(1);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        Ok(out)
    }

    /// Parses a whole buffer; nothing is returned unless every entry is intact.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an RLT1 container".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format(format!("`{name}` dimension overflow")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}` size overflow")))?;
            let entry = match dtype {
                0 => Entry::Tensor(read_payload::<S, f64>(&mut r, shape, numel, &name)?),
                1 => Entry::Tensor(read_payload::<S, f32>(&mut r, shape, numel, &name)?),
                DTYPE_BYTES if ndim == 1 => Entry::Blob(r.take(numel)?.to_vec()),
                _ => return Err(Error::Format(format!("`{name}` has unknown dtype {dtype}"))),
            };
            entries.push((name, entry));
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after last entry", bytes.len() - r.at)));
        }
        Ok(Self { entries })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// half-written container.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn read_payload<S: Scalar, F: Scalar>(r: &mut Reader<'_>, shape: Vec<usize>, numel: usize, name: &str) -> Result<Tensor<S>> {
    let raw = r.take(numel.checked_mul(F::BYTES).ok_or_else(|| Error::Format(format!("`{name}` size overflow")))?)?;
    let data = raw.chunks_exact(F::BYTES).map(|c| S::c(F::read_le(c).f64())).collect();
    Tensor::new(shape, data)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated container: wanted {n} bytes at offset {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
