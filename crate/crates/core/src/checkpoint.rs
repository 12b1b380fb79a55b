//! Self-describing model container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes   "V2WCKPT\0"
//! version     u32       FORMAT_VERSION
//! config_len  u32
//! config      config_len bytes of UTF-8 JSON: {"kind": ..., "config": ...}
//! count       u32       number of tensors
//! count × {
//!   name_len  u32
//!   name      name_len bytes of UTF-8
//!   rows      u32
//!   cols      u32
//!   data      rows·cols f32, row-major
//! }
//! ```
//!
//! Tensors are written in name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, V2wModel};
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 8] = b"V2WCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_V2W: &str = "v2w";
pub const KIND_TFIDF_LINK: &str = "tfidf-link";
pub const KIND_TFIDF_CLASS: &str = "tfidf-class";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Matrix>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Checkpoint(format!("config record: {e}"))
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: serde_json::Value, store: &ParamStore) -> Self {
        Checkpoint {
            kind: kind.into(),
            config,
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
        })
        .map_err(json_err)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&u32_of(header.len(), "config length")?.to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&u32_of(self.tensors.len(), "tensor count")?.to_le_bytes())?;
        for (name, m) in &self.tensors {
            w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&u32_of(m.rows, "rows")?.to_le_bytes())?;
            w.write_all(&u32_of(m.cols, "cols")?.to_le_bytes())?;
            let mut buf = Vec::with_capacity(m.data.len() * 4);
            for v in &m.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = read_u32(&mut r)? as usize;
        let header: Header =
            serde_json::from_slice(&read_bytes(&mut r, header_len)?).map_err(json_err)?;
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let raw = read_bytes(&mut r, rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if tensors
                .insert(name.clone(), Matrix::from_vec(rows, cols, data))
                .is_some()
            {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(json_err)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    Ok(buf)
}

#[derive(Serialize, Deserialize)]
struct V2wRecord {
    model: ModelConfig,
    vocab: Vocabulary,
}

impl V2wModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::to_value(V2wRecord {
            model: self.config().clone(),
            vocab: self.vocab().clone(),
        })
        .map_err(json_err)?;
        Ok(Checkpoint::from_store(KIND_V2W, config, self.store()))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND_V2W)?;
        let rec: V2wRecord = ck.config_as()?;
        V2wModel::from_parts(rec.model, rec.vocab, &ck.tensors)
    }
}
