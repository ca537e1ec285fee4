//! Binary container for named tensors plus string metadata.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "G2PK"
//! version    u32      1
//! meta_count u32
//!   key_len u32, key utf-8, value_len u32, value utf-8   (per entry)
//! tensor_count u32
//!   name_len u32, name utf-8, rank u32, dims u64 × rank,
//!   values f64 × product(dims) as IEEE-754 bits          (per tensor)
//! ```
//!
//! Values are stored as raw bits, so a write/read round trip is exact.

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::params::{ModelConfig, ModelParams, Weights};

pub const MAGIC: &[u8; 4] = b"G2PK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != MAGIC {
            return Err(r.error("missing G2PK magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(&format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.error("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.error(&format!("tensor {name}: {e}")))?;
            ck.tensors.push((name, t));
        }
        if !r.rest().is_empty() {
            return Err(r.error("trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

/// Bounds-checked little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
    version: u32,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader {
            bytes,
            pos: 0,
            path,
            version: VERSION,
        }
    }

    pub(crate) fn with_version(mut self, version: u32) -> Self {
        self.version = version;
        self
    }

    pub(crate) fn error(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            version: self.version,
            detail: format!("{detail} (at byte {})", self.pos),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error("invalid utf-8"))
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

const CONFIG_KEYS: [&str; 6] = ["vocab_size", "joints", "d_model", "layers", "heads", "ff_dim"];

impl ModelParams {
    /// Config echo under `model.*` and every weight under `param.<name>`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let c = &self.config;
        let values = [c.vocab_size, c.joints, c.d_model, c.layers, c.heads, c.ff_dim];
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            ck.push_meta(&format!("model.{k}"), v);
        }
        for (name, t) in self.weights.named() {
            ck.tensors.push((format!("param.{name}"), t.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut values = [0usize; 6];
        for (slot, k) in values.iter_mut().zip(CONFIG_KEYS) {
            let key = format!("model.{k}");
            *slot = ck
                .meta(&key)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks {key}")))?
                .parse()
                .map_err(|_| Error::invalid(format!("checkpoint {key} is not an integer")))?;
        }
        let [vocab_size, joints, d_model, layers, heads, ff_dim] = values;
        let config = ModelConfig {
            vocab_size,
            joints,
            d_model,
            layers,
            heads,
            ff_dim,
        };
        config.validate()?;
        let mut missing = None;
        let weights = Weights::shaped(&config).map(|name, _| {
            match ck.tensor(&format!("param.{name}")) {
                Some(t) => t.clone(),
                None => {
                    missing.get_or_insert_with(|| name.to_string());
                    Tensor::scalar(0.0)
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::invalid(format!("checkpoint lacks parameter {name}")));
        }
        let params = ModelParams { config, weights };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelParams::from_checkpoint(&Checkpoint::load(path)?)
    }
}
