//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "GRMC"                 magic
//! u32                    format version
//! [u8; 32]               SHA-256 of the config JSON that follows
//! u64, bytes             config JSON (model configuration)
//! u32                    entry count
//! entries, sorted by name:
//!   u32, bytes           UTF-8 parameter name
//!   u32, u64 * ndim      shape
//!   f64 * numel          values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use grm_core::model::{GrmParams, ModelConfig};
use grm_core::nn::{named_tensors, Module};
use grm_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, TrackerError};
use crate::scenario::hex_digest;

pub const MAGIC: &[u8; 4] = b"GRMC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: GrmParams,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TrackerError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| TrackerError::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: GrmParams) -> Self {
        Self { config, params }
    }

    /// Hex SHA-256 of the config JSON stored in the header.
    pub fn config_digest(&self) -> String {
        hex_digest(&self.config_json())
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    fn config_json(&self) -> Vec<u8> {
        serde_json::to_vec(&self.config).expect("config serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = self.config_json();
        let mut entries = named_tensors(&self.params);
        entries.sort_by(|a, b| a.0.cmp(&b.0));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&json));
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TrackerError::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(TrackerError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let digest = r.take(32)?;
        let n = r.len()?;
        let json = r.take(n)?;
        if Sha256::digest(json).as_slice() != digest {
            return Err(TrackerError::Checkpoint("config digest does not match".into()));
        }
        let config: ModelConfig =
            serde_json::from_slice(json).map_err(|e| TrackerError::Checkpoint(format!("config: {e}")))?;

        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| TrackerError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| TrackerError::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| TrackerError::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            entries.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(TrackerError::Checkpoint("trailing bytes".into()));
        }

        // Parameter layout comes from the config; values from the entries.
        let mut params = GrmParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut problem = None;
        let mut used = 0;
        params.visit_mut("", &mut |name, t| match entries.get(&name) {
            Some(v) if v.shape() == t.shape() => {
                *t = v.clone();
                used += 1;
            }
            Some(v) => {
                problem.get_or_insert(format!("{name}: shape {:?}, expected {:?}", v.shape(), t.shape()));
            }
            None => {
                problem.get_or_insert(format!("missing parameter {name}"));
            }
        });
        if let Some(p) = problem {
            return Err(TrackerError::Checkpoint(p));
        }
        if used != entries.len() {
            return Err(TrackerError::Checkpoint("checkpoint has unexpected parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
