//! Weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DFW1" | version u32 | tensor count u32
//! per tensor: name length u32 | UTF-8 name | dtype u8 | rank u32 | extents u32 * rank | payload
//! FNV-1a 64 checksum of all payload bytes, u64
//! ```

use std::collections::HashSet;
use std::io::{Read, Write};

use super::Model;
use crate::tensor::{DType, Scalar};

pub const MAGIC: [u8; 4] = *b"DFW1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, not a weight file")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload while reading {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed entry: {0}")]
    Malformed(String),
    #[error("tensor {name}: dtype {found}, model expects {expected}")]
    Dtype {
        name: String,
        expected: DType,
        found: DType,
    },
    #[error("tensor {name}: model expects {expected:?}, file has {found_name} {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found_name: String,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing from file")]
    Missing(String),
    #[error("file holds tensor {0} unknown to the model")]
    Unexpected(String),
}

pub(crate) fn fnv1a64(state: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(state, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// FNV-1a 64 of a whole byte string, for provenance records.
pub fn checksum(bytes: &[u8]) -> u64 {
    fnv1a64(FNV_OFFSET, bytes)
}

/// Serializes every parameter of `model`.
pub fn save_weights<F: Scalar>(model: &dyn Model<F>, sink: &mut impl Write) -> std::io::Result<()> {
    let params = model.parameters();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut checksum = FNV_OFFSET;
    for (name, t) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let start = out.len();
        for &v in t.data().iter() {
            v.write_le(&mut out);
        }
        checksum = fnv1a64(checksum, &out[start..]);
    }
    out.extend_from_slice(&checksum.to_le_bytes());
    sink.write_all(&out)
}

struct Entry<'a> {
    dtype: DType,
    shape: Vec<usize>,
    payload: &'a [u8],
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], LoadError> {
        if self.buf.len() - self.pos < n {
            return Err(LoadError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn parse(buf: &[u8]) -> Result<Vec<(String, Entry<'_>)>, LoadError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(LoadError::BadMagic(magic));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(LoadError::UnsupportedVersion(version));
    }
    let count = c.u32("tensor count")?;
    let mut entries = Vec::new();
    let mut checksum = FNV_OFFSET;
    for i in 0..count {
        let len = c.u32(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(c.take(len, &format!("name of tensor {i}"))?)
            .map_err(|_| LoadError::Malformed(format!("name of tensor {i} is not UTF-8")))?
            .to_string();
        let tag = c.take(1, &format!("dtype of {name}"))?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| LoadError::Malformed(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = c.u32(&format!("rank of {name}"))? as usize;
        let shape = (0..rank)
            .map(|_| c.u32(&format!("extents of {name}")).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let elems = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| LoadError::Malformed(format!("{name}: extents overflow")))?;
        let payload = c.take(elems, &format!("payload of {name}"))?;
        checksum = fnv1a64(checksum, payload);
        entries.push((name, Entry { dtype, shape, payload }));
    }
    let stored = u64::from_le_bytes(c.take(8, "checksum")?.try_into().unwrap());
    if stored != checksum {
        return Err(LoadError::Checksum {
            stored,
            computed: checksum,
        });
    }
    if c.pos != buf.len() {
        return Err(LoadError::Malformed(format!(
            "{} trailing bytes after checksum",
            buf.len() - c.pos
        )));
    }
    Ok(entries)
}

/// Reads a weight file into `model`. Tensors are matched in order; every
/// one is validated before any parameter is written, so on error the model
/// is left untouched.
pub fn load_weights<F: Scalar>(model: &dyn Model<F>, source: &mut impl Read) -> Result<(), LoadError> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    let entries = parse(&buf)?;
    let mut names = HashSet::new();
    if let Some((dup, _)) = entries.iter().find(|(n, _)| !names.insert(n.as_str())) {
        return Err(LoadError::Malformed(format!("duplicate tensor {dup}")));
    }
    let params = model.parameters();
    for ((name, t), (found_name, e)) in params.iter().zip(&entries) {
        if found_name != name || e.shape != t.shape() {
            return Err(LoadError::Shape {
                name: name.clone(),
                expected: t.shape().to_vec(),
                found_name: found_name.clone(),
                found: e.shape.clone(),
            });
        }
        if e.dtype != F::DTYPE {
            return Err(LoadError::Dtype {
                name: name.clone(),
                expected: F::DTYPE,
                found: e.dtype,
            });
        }
    }
    if let Some((name, _)) = params.get(entries.len()) {
        return Err(LoadError::Missing(name.clone()));
    }
    if let Some((name, _)) = entries.get(params.len()) {
        return Err(LoadError::Unexpected(name.clone()));
    }
    let size = F::DTYPE.size();
    for ((_, t), (_, e)) in params.iter().zip(&entries) {
        let mut d = t.data_mut();
        for (v, chunk) in d.iter_mut().zip(e.payload.chunks_exact(size)) {
            *v = F::read_le(chunk);
        }
    }
    Ok(())
}
