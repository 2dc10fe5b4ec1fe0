//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "SFCKPT\0\0"
//! version    u32
//! echo_len   u64       followed by a UTF-8 TOML echo of the model config and metadata
//! count      u64       number of parameter records
//! record     name_len u32, name bytes, group u8, rows u64, cols u64, rows*cols f64
//! ```
//!
//! Records appear in store order, so identical parameters give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamGroup, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Echo {
    model: ModelConfig,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Parameters plus the configuration they were built with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Free-form string metadata (task kind, horizons, class count, ...).
    pub meta: BTreeMap<String, String>,
    pub store: ParamStore,
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Backbone => 0,
        ParamGroup::Reconstruction => 1,
        ParamGroup::Head => 2,
    }
}

fn group_from(code: u8) -> Result<ParamGroup> {
    Ok(match code {
        0 => ParamGroup::Backbone,
        1 => ParamGroup::Reconstruction,
        2 => ParamGroup::Head,
        other => return Err(Error::Checkpoint(format!("unknown parameter group {other}"))),
    })
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflow"))
    }
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, meta: BTreeMap<String, String>) -> Self {
        Self {
            config: params.config.clone(),
            meta,
            store: params.store.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let echo = toml::to_string(&Echo {
            model: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| bad(format!("cannot encode config echo: {e}")))?;
        let mut out = Vec::with_capacity(64 + self.store.scalar_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(echo.len() as u64).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for (_, p) in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(group_code(p.group));
            out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let echo_len = c.len()?;
        let echo = std::str::from_utf8(c.take(echo_len)?).map_err(|_| bad("config echo is not UTF-8"))?;
        let echo: Echo = toml::from_str(echo).map_err(|e| bad(format!("config echo: {e}")))?;
        let count = c.len()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| bad("parameter name is not UTF-8"))?
                .to_string();
            let group = group_from(c.u8()?)?;
            let rows = c.len()?;
            let cols = c.len()?;
            let n = rows.checked_mul(cols).ok_or_else(|| bad("shape overflow"))?;
            let raw = c.take(n.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            if store.id(&name).is_some() {
                return Err(bad(format!("duplicate parameter `{name}`")));
            }
            store.insert(name, group, Matrix::from_vec(rows, cols, data)?)?;
        }
        if c.pos != buf.len() {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(Self {
            config: echo.model,
            meta: echo.meta,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds typed model handles over the stored parameters.
    pub fn into_params(self) -> Result<ModelParams> {
        ModelParams::from_store(self.config, self.store)
    }
}
