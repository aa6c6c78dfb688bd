//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! "ATNK"                      magic
//! u32  format_version         currently 1
//! u32  config_len             byte length of the config text
//! [u8] config                 canonical `key = value` text, UTF-8
//! u32  entry_count
//! entry_count times, sorted by name, names unique:
//!   u32  name_len
//!   [u8] name                 UTF-8
//!   u32  rank
//!   u64  dims[rank]
//!   u8   dtype                1 = f32, 2 = f64
//!   u64  payload_len          product(dims) * dtype width
//!   [u8] payload              little-endian floats, row-major
//!   u32  crc32                CRC-32 (IEEE) of payload
//! ```
//!
//! Writing the same state twice yields identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::ModelConfig;
use crate::error::Error as ModelError;
use crate::tensor::Tensor;
use crate::transformer::{parameter_shapes, ModelParams};

pub const MAGIC: &[u8; 4] = b"ATNK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::F32),
            2 => Some(Self::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"ATNK\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("trailing bytes after last entry")]
    TrailingBytes,
    #[error("invalid UTF-8 in {0}")]
    Utf8(String),
    #[error("embedded config: {0}")]
    Config(ModelError),
    #[error("entry `{0}`: unknown dtype code {1}")]
    UnknownDtype(String, u8),
    #[error("entry `{entry}`: payload is {found} bytes, dims require {expected}")]
    PayloadLength {
        entry: String,
        expected: u64,
        found: u64,
    },
    #[error("entry `{0}`: checksum mismatch")]
    Checksum(String),
    #[error("entry `{0}`: non-finite value")]
    NonFinite(String),
    #[error("entry `{0}`: names must be unique and sorted")]
    Order(String),
    #[error("entry `{entry}` inconsistent with config: {reason}")]
    Inconsistent { entry: String, reason: String },
}

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub dtype: Dtype,
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn from_tensor(name: &str, t: &Tensor, dtype: Dtype) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * dtype.width());
        for &v in t.data() {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
        Self {
            name: name.to_string(),
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            dtype,
            payload,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self.dtype {
            Dtype::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => self
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }
    }
}

/// Serialises a config text and entries. Entries are written in the order
/// given; callers that want a valid file pass them sorted.
pub fn encode(config_text: &str, entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(e.dtype as u8);
        out.extend_from_slice(&(e.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&e.payload);
        out.extend_from_slice(&crc32fast::hash(&e.payload).to_le_bytes());
    }
    out
}

pub fn to_bytes(params: &ModelParams, cfg: &ModelConfig, dtype: Dtype) -> Vec<u8> {
    let entries: Vec<Entry> = params
        .named()
        .into_iter()
        .map(|(name, t)| Entry::from_tensor(&name, t, dtype))
        .collect();
    encode(&cfg.to_canonical_text(), &entries)
}

/// Writes `params` and `cfg` with f64 payloads.
pub fn save(
    params: &ModelParams,
    cfg: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    save_with(params, cfg, path, Dtype::F64)
}

pub fn save_with(
    params: &ModelParams,
    cfg: &ModelConfig,
    path: impl AsRef<Path>,
    dtype: Dtype,
) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(params, cfg, dtype))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig), CheckpointError> {
    from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String, CheckpointError> {
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Utf8(what.to_string()))
    }
}

/// Parses the container and validates each entry (length, checksum,
/// finiteness, ordering) without interpreting it against a config.
pub fn decode(bytes: &[u8]) -> Result<(String, Vec<Entry>), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let config_len = r.u32("config length")? as usize;
    let config_text = r.string(config_len, "config")?;
    let count = r.u32("entry count")?;

    let mut entries: Vec<Entry> = Vec::new();
    for i in 0..count {
        let name_len = r.u32(&format!("name length of entry {i}"))? as usize;
        let name = r.string(name_len, &format!("name of entry {i}"))?;
        let rank = r.u32(&format!("rank of `{name}`"))?;
        if rank == 0 || rank as usize > crate::tensor::MAX_RANK {
            return Err(CheckpointError::Inconsistent {
                entry: name,
                reason: format!("rank {rank} outside 1..={}", crate::tensor::MAX_RANK),
            });
        }
        let dims = (0..rank)
            .map(|_| r.u64(&format!("dims of `{name}`")))
            .collect::<Result<Vec<_>, _>>()?;
        let code = r.u8(&format!("dtype of `{name}`"))?;
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| CheckpointError::UnknownDtype(name.clone(), code))?;
        let payload_len = r.u64(&format!("payload length of `{name}`"))?;
        let expected = dims
            .iter()
            .try_fold(dtype.width() as u64, |acc, &d| acc.checked_mul(d));
        if expected != Some(payload_len) {
            return Err(CheckpointError::PayloadLength {
                entry: name,
                expected: expected.unwrap_or(u64::MAX),
                found: payload_len,
            });
        }
        let payload = r
            .take(payload_len as usize, &format!("payload of `{name}`"))?
            .to_vec();
        let crc = r.u32(&format!("checksum of `{name}`"))?;
        if crc != crc32fast::hash(&payload) {
            return Err(CheckpointError::Checksum(name));
        }
        let entry = Entry {
            name,
            dims,
            dtype,
            payload,
        };
        if !entry.values().iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::NonFinite(entry.name));
        }
        if let Some(prev) = entries.last() {
            if prev.name >= entry.name {
                return Err(CheckpointError::Order(entry.name));
            }
        }
        entries.push(entry);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok((config_text, entries))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, ModelConfig), CheckpointError> {
    let (config_text, entries) = decode(bytes)?;
    let cfg = ModelConfig::parse(&config_text).map_err(CheckpointError::Config)?;
    cfg.validate().map_err(CheckpointError::Config)?;

    let expected = parameter_shapes(&cfg);
    let mut tensors = BTreeMap::new();
    for e in entries {
        let Some(shape) = expected.get(&e.name) else {
            return Err(CheckpointError::Inconsistent {
                entry: e.name,
                reason: "not a parameter of this configuration".into(),
            });
        };
        let dims: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
        if &dims != shape {
            return Err(CheckpointError::Inconsistent {
                entry: e.name,
                reason: format!("dims {dims:?}, config requires {shape:?}"),
            });
        }
        let t = Tensor::new(dims, e.values()).map_err(|err| CheckpointError::Inconsistent {
            entry: e.name.clone(),
            reason: err.to_string(),
        })?;
        tensors.insert(e.name, t);
    }
    if let Some(missing) = expected.keys().find(|k| !tensors.contains_key(*k)) {
        return Err(CheckpointError::Inconsistent {
            entry: missing.clone(),
            reason: "missing from checkpoint".into(),
        });
    }
    let params = ModelParams::from_named(&cfg, tensors).map_err(CheckpointError::Config)?;
    Ok((params, cfg))
}
