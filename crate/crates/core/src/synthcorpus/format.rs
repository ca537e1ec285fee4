//! Corpus file layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "SLPC"
//! version    u32      1
//! seed       u64
//! glosses    u32      non-reserved vocabulary size
//! joints     u32
//! train      u32      sample counts per split
//! dev        u32
//! test       u32
//! noise_std  f64
//! samples    train, then dev, then test; each record is
//!   n          u32
//!   gloss ids  u32 × n
//!   m          u32
//!   frames     f64 × m × joints × 3, row-major
//!   alignment  u32 × m
//! ```
//!
//! Prototypes are not stored; they are regenerated from the manifest.

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seqmodel::{GlossSequence, GlossVocab, PoseSequence, Reader};

use super::{prototypes, Corpus, CorpusManifest, CorpusSample, Split};

pub const MAGIC: &[u8; 4] = b"SLPC";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Corpus {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.manifest;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&m.seed.to_le_bytes());
        for v in [m.glosses, m.joints, m.train, m.dev, m.test] {
            put_u32(&mut out, v);
        }
        out.extend_from_slice(&m.noise_std.to_bits().to_le_bytes());
        for split in Split::ALL {
            for s in self.split(split) {
                put_u32(&mut out, s.glosses.len());
                for &id in s.glosses.ids() {
                    put_u32(&mut out, id);
                }
                put_u32(&mut out, s.poses.len());
                for v in s.poses.frames().data() {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
                for &a in &s.alignment {
                    put_u32(&mut out, a);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path).with_version(VERSION);
        if r.take(4)? != MAGIC {
            return Err(r.error("not a corpus file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(&format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let mut counts = [0usize; 5];
        for c in counts.iter_mut() {
            *c = r.u32()? as usize;
        }
        let [glosses, joints, train, dev, test] = counts;
        let manifest = CorpusManifest {
            seed,
            glosses,
            joints,
            train,
            dev,
            test,
            noise_std: r.f64()?,
        };
        manifest.validate().map_err(|e| r.error(&e.to_string()))?;
        let mut read_split = |count: usize| -> Result<Vec<CorpusSample>> {
            (0..count).map(|_| read_sample(&mut r, &manifest)).collect()
        };
        let (train, dev, test) = (read_split(train)?, read_split(dev)?, read_split(test)?);
        if !r.rest().is_empty() {
            return Err(r.error("trailing bytes after last sample"));
        }
        Ok(Corpus {
            vocab: GlossVocab::synthetic(manifest.glosses)?,
            prototypes: prototypes(&manifest)?,
            manifest,
            train,
            dev,
            test,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Corpus::from_bytes(&bytes, path)
    }
}

fn read_sample(r: &mut Reader<'_>, manifest: &CorpusManifest) -> Result<CorpusSample> {
    let n = r.u32()? as usize;
    if n == 0 || n > manifest.glosses {
        return Err(r.error(&format!("sample with {n} glosses")));
    }
    let ids = (0..n)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let m = r.u32()? as usize;
    let dims = manifest.joints * 3;
    // Guard the allocation before trusting m.
    if m == 0 || r.rest().len() < m * (dims * 8 + 4) {
        return Err(r.error("truncated file"));
    }
    let frames = (0..m * dims).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let alignment = (0..m)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let sample = (|| -> Result<CorpusSample> {
        let s = CorpusSample {
            glosses: GlossSequence::new(ids, manifest.vocab_size())?,
            poses: PoseSequence::new(Tensor::new(vec![m, dims], frames)?, manifest.joints)?,
            alignment,
        };
        s.validate()?;
        Ok(s)
    })();
    sample.map_err(|e| r.error(&e.to_string()))
}
