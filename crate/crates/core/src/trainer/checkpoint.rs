//! `SSNACKP1` checkpoint container.
//!
//! ```text
//! magic "SSNACKP1"   8 bytes
//! version            u32 (1)
//! manifest length    u64, then UTF-8 JSON
//! tensor count       u32
//! per tensor:        name length u32, UTF-8 name, rows u32, cols u32,
//!                    dtype u8 (1 = f64), 3 reserved bytes, f64 LE values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::embeddings::write_atomic;
use crate::data::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::model::ModelConfig;
use crate::numerics::Tensor;
use crate::trainer::TrainConfig;

pub const CKPT_MAGIC: &[u8; 8] = b"SSNACKP1";
pub const CKPT_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

/// Per-epoch record kept in the manifest. Wall time is left out so that
/// identical runs produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub loss: f64,
    pub val_recall_10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// Every stream of epoch `e` is derived from `(seed, e)`, so the next
    /// epoch index is the whole state.
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub interactions: String,
    pub embeddings: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// "best" or "last".
    pub kind: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub data: Option<DataPaths>,
    /// Epoch whose parameters are stored under `param/`.
    pub epoch: usize,
    pub metrics: MetricsReport,
    pub rng: RngState,
    pub adam_step: u64,
    pub best_epoch: usize,
    pub best_metrics: MetricsReport,
    pub history: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, with the prefix removed.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&[0; 3]);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::BadMagic(origin.to_string()));
        }
        let mut r = Reader { bytes, pos: 8, origin };
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Data(format!(
                "{origin}: unsupported checkpoint version {version}"
            )));
        }
        let len = usize::try_from(r.u64()?).map_err(|_| Error::Truncated(origin.to_string()))?;
        let manifest: Manifest = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Data(format!("{origin}: malformed manifest: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Data(format!("{origin}: tensor name is not UTF-8")))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let dtype = r.take(4)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Data(format!("{origin}: tensor {name} has dtype {dtype}")));
            }
            let bytes_len = rows
                .checked_mul(cols)
                .and_then(|v| v.checked_mul(8))
                .ok_or_else(|| Error::Truncated(origin.to_string()))?;
            let data = r
                .take(bytes_len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(rows, cols, data).map_err(|_| Error::NonFinite(format!("{origin}: {name}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{origin}: {} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(self.origin.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
