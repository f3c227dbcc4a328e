//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HCATW"  u16 version  u32 entry count
//! per entry: u16 name length, name (UTF-8), u8 dtype, u8 rank,
//!            u64 per dimension, u64 payload offset
//! u64 payload length, payload
//! 32-byte SHA-256 of every preceding byte
//! ```
//!
//! Entries appear in the model's parameter order and tensors are stored
//! row-major, so saving the same model twice gives the same bytes.

use std::io::Write as _;
use std::path::Path;

use hcat::model::{Hcat, ModelConfig};
use hcat::numerics::Parameterized;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"HCATW";
pub const VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

impl Entry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }
}

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("not a weight file (bad magic)")]
    Magic,
    #[error("unsupported weight file version {found} (expected {VERSION})")]
    Version { found: u16 },
    #[error("checksum mismatch: file is truncated or corrupt")]
    Checksum,
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("tensor `{name}`: file has shape {found:?}, config expects {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor `{0}` is missing from the file")]
    Missing(String),
    #[error("tensor `{0}` in the file is not part of the model")]
    Unexpected(String),
    #[error(transparent)]
    Model(#[from] hcat::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serialises every parameter of `model`.
pub fn encode(model: &Hcat, dtype: DType) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    model.visit_params(&mut |p| {
        entries.push(Entry {
            name: p.name().to_string(),
            shape: p.shape().to_vec(),
            dtype,
            offset: payload.len() as u64,
        });
        for &x in p.tensor().data() {
            match dtype {
                DType::F64 => payload.extend_from_slice(&x.to_le_bytes()),
                DType::F32 => payload.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    });

    let mut out = Vec::with_capacity(payload.len() + 64 * entries.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype.code());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&e.offset.to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| WeightError::Malformed(format!("header runs past the end at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WeightError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WeightError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A parsed and integrity-checked weight file.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub version: u16,
    pub entries: Vec<Entry>,
    payload: Vec<u8>,
}

impl WeightFile {
    pub fn decode(bytes: &[u8]) -> Result<Self, WeightError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(WeightError::Magic);
        }
        if bytes.len() < MAGIC.len() + 2 {
            return Err(WeightError::Checksum);
        }
        let version = u16::from_le_bytes([bytes[5], bytes[6]]);
        if version != VERSION {
            return Err(WeightError::Version { found: version });
        }
        if bytes.len() < MAGIC.len() + 2 + DIGEST_LEN {
            return Err(WeightError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(WeightError::Checksum);
        }

        let mut r = Reader { buf: body, pos: MAGIC.len() + 2 };
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| WeightError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let dtype = DType::from_code(dtype).ok_or_else(|| WeightError::Malformed(format!("tensor `{name}` has unknown dtype {dtype}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64()?;
            entries.push(Entry { name, shape, dtype, offset });
        }
        let len = r.u64()? as usize;
        let payload = r.take(len)?.to_vec();
        if r.pos != body.len() {
            return Err(WeightError::Malformed("trailing bytes after payload".into()));
        }
        for e in &entries {
            let end = (e.offset as usize).checked_add(e.byte_len());
            if end.is_none_or(|end| end > payload.len()) {
                return Err(WeightError::Malformed(format!("tensor `{}` lies outside the payload", e.name)));
            }
        }
        Ok(Self { version, entries, payload })
    }

    pub fn read(path: &Path) -> Result<Self, WeightError> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Values of one entry, widened to `f64`.
    pub fn values(&self, e: &Entry) -> Vec<f64> {
        let bytes = &self.payload[e.offset as usize..e.offset as usize + e.byte_len()];
        match e.dtype {
            DType::F64 => bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            DType::F32 => bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
        }
    }

    /// Builds a model for `config` and fills it from the file. Every shape is
    /// checked before any value is copied.
    pub fn into_model(&self, config: ModelConfig) -> Result<Hcat, WeightError> {
        let mut model = Hcat::new(config, 0)?;
        let mut expected = Vec::new();
        model.visit_params(&mut |p| expected.push((p.name().to_string(), p.shape().to_vec())));
        for e in &self.entries {
            if !expected.iter().any(|(n, _)| *n == e.name) {
                return Err(WeightError::Unexpected(e.name.clone()));
            }
        }
        for (name, shape) in &expected {
            let e = self.entries.iter().find(|e| e.name == *name).ok_or_else(|| WeightError::Missing(name.clone()))?;
            if e.shape != *shape {
                return Err(WeightError::Shape {
                    name: name.clone(),
                    found: e.shape.clone(),
                    expected: shape.clone(),
                });
            }
        }
        model.visit_params_mut(&mut |p| {
            let e = self.entries.iter().find(|e| e.name == p.name()).expect("checked above");
            p.tensor_mut().data_mut().copy_from_slice(&self.values(e));
        });
        Ok(model)
    }
}

/// Writes atomically: the file appears complete or not at all.
pub fn save(model: &Hcat, path: &Path, dtype: DType) -> Result<(), WeightError> {
    write_atomic(path, &encode(model, dtype))
}

pub fn load(path: &Path, config: ModelConfig) -> Result<Hcat, WeightError> {
    WeightFile::read(path)?.into_model(config)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), WeightError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path)?;
    Ok(())
}
