//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic         8 bytes  "MFRPCKPT"
//! format        u32      FORMAT_VERSION
//! param_version u64      ParameterSet version
//! n_stamps      u32
//!   name_len u32, name utf-8, value u64          (repeated)
//! n_tensors     u32
//!   name_len u32, name utf-8, rank u32, dims u64 x rank,
//!   data f64 x prod(dims)                        (repeated)
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use super::{AutodiffError, ParameterSet, Tensor};

pub const MAGIC: &[u8; 8] = b"MFRPCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub param_version: u64,
    /// Named auxiliary counters, e.g. the frozen-decoder sync stamp.
    pub stamps: Vec<(String, u64)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(params: &ParameterSet) -> Self {
        Self {
            param_version: params.version(),
            stamps: Vec::new(),
            tensors: params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn stamp(&self, name: &str) -> Option<u64> {
        self.stamps.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn params_with_prefix(&self, prefix: &str) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (k, v) in &self.tensors {
            if let Some(rest) = k.strip_prefix(prefix) {
                p.insert(rest, v.clone());
            }
        }
        p.set_version(self.param_version);
        p
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.param_version.to_le_bytes());
        out.extend_from_slice(&(self.stamps.len() as u32).to_le_bytes());
        for (name, value) in &self.stamps {
            put_str(&mut out, name);
            out.extend_from_slice(&value.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, AutodiffError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(err("bad magic"));
        }
        let format = r.u32()?;
        if format != FORMAT_VERSION {
            return Err(AutodiffError::Checkpoint(alloc::format!(
                "unsupported format version {format}"
            )));
        }
        let param_version = r.u64()?;
        let n_stamps = r.u32()?;
        let mut stamps = Vec::new();
        for _ in 0..n_stamps {
            let name = r.string()?;
            stamps.push((name, r.u64()?));
        }
        let n = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(r.array()?));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Self {
            param_version,
            stamps,
            tensors,
        })
    }
}

fn err(msg: &str) -> AutodiffError {
    AutodiffError::Checkpoint(String::from(msg))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AutodiffError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], AutodiffError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, AutodiffError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, AutodiffError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String, AutodiffError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        core::str::from_utf8(b)
            .map(String::from)
            .map_err(|_| err("name is not utf-8"))
    }
}
