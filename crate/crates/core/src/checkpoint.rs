//! Binary checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "MIMQ" | u32 version | u32 meta_len | meta (JSON) | u32 count
//! count × { u16 name_len | name | u8 dtype | u8 ndim | ndim × u32 dim | u64 offset | u64 nbytes }
//! u64 payload_len | payload
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: [u8; 4] = *b"MIMQ";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Task name, or a `+`-joined list for joint runs.
    pub task: String,
    pub step: usize,
    pub config_hash: String,
    /// Seed of the run's generator.
    pub rng: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, e) in self.params.iter() {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| corrupt(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(DTYPE_F32);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let nbytes = (e.data.len() * 4) as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&nbytes.to_le_bytes());
            offset += nbytes;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, e) in self.params.iter() {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates a whole container. Nothing is returned unless
    /// every entry is well formed.
    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}, expected {VERSION}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| corrupt(format!("metadata: {e}")))?;
        let count = r.u32("entry count")? as usize;
        struct Entry {
            name: String,
            shape: Vec<usize>,
            offset: u64,
            nbytes: u64,
        }
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| corrupt("parameter name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(corrupt(format!("duplicate entry `{name}`")));
            }
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(corrupt(format!("`{name}` has unknown dtype {dtype}")));
            }
            let ndim = r.u8("ndim")? as usize;
            let shape = (0..ndim).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64("offset")?;
            let nbytes = r.u64("nbytes")?;
            let numel = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            if numel.and_then(|n| n.checked_mul(4)) != Some(nbytes) {
                return Err(corrupt(format!("`{name}`: {nbytes} bytes do not match shape {shape:?}")));
            }
            entries.push(Entry { name, shape, offset, nbytes });
        }
        let payload_len = r.u64("payload length")?;
        let payload = r.take(
            usize::try_from(payload_len).map_err(|_| corrupt("payload too large"))?,
            "payload",
        )?;
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let mut params = ParamStore::new();
        for e in entries {
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&end| end <= payload_len)
                .ok_or_else(|| corrupt(format!("`{}` extent exceeds the payload", e.name)))?;
            let bytes = &payload[e.offset as usize..end as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(&e.name, e.shape, data);
        }
        Ok(Checkpoint { meta, params })
    }

    /// Writes through a temporary file and a rename, so a failed save never
    /// leaves a partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
