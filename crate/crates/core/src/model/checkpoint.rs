//! Binary checkpoint container:
//!
//! ```text
//! b"CALLIGCK"  u32 schema  u64 header_len  header (canonical JSON)
//! u32 count, then per parameter:
//!   u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 data[∏dims]
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_parameters, ModelConfig, ParamStore, Policy};
use crate::error::{Error, Result};
use crate::fsutil::{fingerprint, write_atomic};
use crate::sim::SimConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CALLIGCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngRecord {
    seed: u64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    sim: SimConfig,
    rng: RngRecord,
    config_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

/// Trained (or freshly initialized) policy plus the simulator settings it
/// was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheckpoint {
    pub model: ModelConfig,
    pub sim: SimConfig,
    pub params: ParamStore,
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
    /// Canonical run configuration that produced the checkpoint.
    pub provenance: Option<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("implausible {what} {v}")))
    }
}

impl PolicyCheckpoint {
    pub fn initial(model: ModelConfig, sim: SimConfig, seed: u64) -> Result<Self> {
        let params = init_parameters(&model, seed)?;
        Ok(PolicyCheckpoint {
            model,
            sim,
            params,
            seed,
            step: 0,
            provenance: None,
        })
    }

    pub fn policy(&self) -> Result<Policy> {
        Policy::new(self.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            sim: self.sim.clone(),
            rng: RngRecord {
                seed: self.seed,
                step: self.step,
            },
            config_fingerprint: fingerprint(&self.model),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(32 + json.len() + self.params.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!("checkpoint schema {version} (expected {CHECKPOINT_SCHEMA_VERSION})"),
            ));
        }
        let hlen = r.len("header length")?;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, e.to_string()))?;
        if header.config_fingerprint != fingerprint(&header.model) {
            return Err(Error::format(path, "config fingerprint mismatch"));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.len("dimension")?);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after parameters"));
        }
        let params = ParamStore { tensors };
        params
            .check_against(&init_parameters(&header.model, 0)?)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(PolicyCheckpoint {
            model: header.model,
            sim: header.sim,
            params,
            seed: header.rng.seed,
            step: header.rng.step,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}
