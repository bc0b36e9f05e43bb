//! Frozen per-layer item embeddings and the `SSNAEMB1` container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SSNAEMB1"            8 bytes
//! version                     u32 (1)
//! item count                  u32
//! layer count                 u32
//! d_llm                       u32
//! dtype                       u8  (0 = f32)
//! reserved                    3 bytes, zero
//! index length                u64
//! index                       UTF-8 JSON object, item id -> row
//! payload                     f32[items][layers][d_llm], top layer first
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const EMB_MAGIC: &[u8; 8] = b"SSNAEMB1";
pub const EMB_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 8 + 4 * 4 + 1 + 3 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    layers: usize,
    d_llm: usize,
    data: Vec<f32>,
}

impl EmbeddingStore {
    /// `data` is item-major, then layer (top first), then value.
    pub fn new(ids: Vec<String>, layers: usize, d_llm: usize, data: Vec<f32>) -> Result<Self> {
        if ids.is_empty() || layers == 0 || d_llm == 0 {
            return Err(Error::Data(format!(
                "embedding store needs items, layers and d_llm > 0 (got {}, {layers}, {d_llm})",
                ids.len()
            )));
        }
        if data.len() != ids.len() * layers * d_llm {
            return Err(Error::Shape(format!(
                "embedding payload has {} values, expected {} x {layers} x {d_llm}",
                data.len(),
                ids.len()
            )));
        }
        if let Some(p) = data.iter().position(|v| !v.is_finite()) {
            let per_item = layers * d_llm;
            return Err(Error::NonFinite(format!(
                "embedding of item {} (layer {})",
                ids[p / per_item],
                (p % per_item) / d_llm
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(Error::Data(format!("duplicate item id {id} in embedding index")));
            }
        }
        Ok(EmbeddingStore {
            ids,
            index,
            layers,
            d_llm,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stored layer count.
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn d_llm(&self) -> usize {
        self.d_llm
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Embedding of `row` at depth `layer` (0 = top).
    pub fn vector(&self, row: usize, layer: usize) -> &[f32] {
        assert!(layer < self.layers, "layer {layer} out of {}", self.layers);
        let start = (row * self.layers + layer) * self.d_llm;
        &self.data[start..start + self.d_llm]
    }

    /// Stacks the `layer` embeddings of `rows` into a `[rows.len() x d_llm]` matrix.
    pub fn layer_matrix(&self, rows: &[usize], layer: usize) -> Tensor {
        let mut out = Vec::with_capacity(rows.len() * self.d_llm);
        for &r in rows {
            out.extend(self.vector(r, layer).iter().map(|&v| f64::from(v)));
        }
        Tensor::from_raw(rows.len(), self.d_llm, out)
    }

    /// Keeps only the top `layers` layers.
    pub fn with_top_layers(&self, layers: usize) -> Result<Self> {
        if layers == 0 || layers > self.layers {
            return Err(Error::Config(format!(
                "cannot keep {layers} of {} stored layers",
                self.layers
            )));
        }
        let mut data = Vec::with_capacity(self.len() * layers * self.d_llm);
        for row in 0..self.len() {
            for m in 0..layers {
                data.extend_from_slice(self.vector(row, m));
            }
        }
        EmbeddingStore::new(self.ids.clone(), layers, self.d_llm, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let index: BTreeMap<&str, usize> = self.index.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        let blob = serde_json::to_vec(&index).expect("string keys serialize");
        let mut out = Vec::with_capacity(HEADER_LEN + blob.len() + self.data.len() * 4);
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMB_VERSION.to_le_bytes());
        for n in [self.len(), self.layers, self.d_llm] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let truncated = || Error::Truncated(origin.to_string());
        if bytes.len() < 8 || &bytes[..8] != EMB_MAGIC {
            return Err(Error::BadMagic(origin.to_string()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != EMB_VERSION {
            return Err(Error::Data(format!("{origin}: unsupported version {version}")));
        }
        let (items, layers, d_llm) = (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
        let dtype = bytes[24];
        if dtype != DTYPE_F32 {
            return Err(Error::Data(format!("{origin}: unsupported dtype tag {dtype}")));
        }
        let blob_len = u64::from_le_bytes(bytes[28..36].try_into().unwrap());
        let blob_end = usize::try_from(blob_len)
            .ok()
            .and_then(|n| HEADER_LEN.checked_add(n))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(truncated)?;
        let payload_len = items
            .checked_mul(layers)
            .and_then(|n| n.checked_mul(d_llm))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(truncated)?;
        let payload = &bytes[blob_end..];
        match payload.len().cmp(&payload_len) {
            std::cmp::Ordering::Less => return Err(truncated()),
            std::cmp::Ordering::Greater => {
                return Err(Error::Data(format!(
                    "{origin}: {} trailing bytes after payload",
                    payload.len() - payload_len
                )))
            }
            std::cmp::Ordering::Equal => {}
        }
        let index: HashMap<String, usize> = serde_json::from_slice(&bytes[HEADER_LEN..blob_end])
            .map_err(|e| Error::Data(format!("{origin}: malformed index: {e}")))?;
        if index.len() != items {
            return Err(Error::Data(format!(
                "{origin}: index lists {} items, header declares {items}",
                index.len()
            )));
        }
        let mut ids = vec![None; items];
        for (id, row) in index {
            match ids.get_mut(row) {
                Some(slot @ None) => *slot = Some(id),
                _ => {
                    return Err(Error::Data(format!(
                        "{origin}: index row {row} out of range or repeated"
                    )))
                }
            }
        }
        let ids: Vec<String> = ids.into_iter().map(|s| s.expect("bijective index")).collect();
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingStore::new(ids, layers, d_llm, data)
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes, &path.display().to_string())
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub fn save_embeddings(store: &EmbeddingStore, path: &Path) -> Result<()> {
    write_atomic(path, &store.to_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}
