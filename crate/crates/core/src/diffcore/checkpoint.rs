//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RWCK" | version: u16 | header_len: u32 | header (JSON, UTF-8)
//! then, for every tensor listed in the header, rows·cols f32 values
//! ```
//!
//! The header carries the architecture description, the global step, and
//! the tensor directory (`name`, `shape`, `trainable`). Optimizer moments are
//! stored as extra tensors suffixed `#m` and `#v`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

use super::ParamStore;

const MAGIC: &[u8; 4] = b"RWCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arch: serde_json::Value,
    global_step: u64,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: serde_json::Value,
    pub global_step: u64,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new<A: Serialize>(arch: &A, global_step: u64, store: ParamStore) -> Result<Self> {
        Ok(Checkpoint {
            arch: serde_json::to_value(arch)?,
            global_step,
            store,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payloads: Vec<&Array2<f64>> = Vec::new();
        for (name, p) in self.store.iter() {
            let (r, c) = p.value.dim();
            for (suffix, t) in [("", &p.value), ("#m", &p.m), ("#v", &p.v)] {
                tensors.push(TensorEntry {
                    name: format!("{name}{suffix}"),
                    shape: [r, c],
                    trainable: p.trainable,
                });
                payloads.push(t);
            }
        }
        let header = Header {
            arch: self.arch.clone(),
            global_step: self.global_step,
            optimizer_step: self.store.step,
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(
            10 + header.len() + 4 * payloads.iter().map(|t| t.len()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in payloads {
            for &x in t.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(bad("missing RWCK magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let body = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 10 + hlen;
        let mut store = ParamStore::new();
        let mut pending: Option<(String, Array2<f64>, Array2<f64>, bool)> = None;
        for entry in &header.tensors {
            let [r, c] = entry.shape;
            let n = r * c;
            let raw = bytes
                .get(cursor..cursor + 4 * n)
                .ok_or_else(|| bad(&format!("truncated payload for `{}`", entry.name)))?;
            cursor += 4 * n;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
                .collect();
            let t = Array2::from_shape_vec((r, c), data).map_err(|e| bad(&e.to_string()))?;
            if let Some(base) = entry.name.strip_suffix("#m") {
                match pending.as_mut() {
                    Some((n, _, m, _)) if n == base => *m = t,
                    _ => return Err(bad(&format!("orphan moment `{}`", entry.name))),
                }
            } else if let Some(base) = entry.name.strip_suffix("#v") {
                let Some((n, value, m, trainable)) = pending.take() else {
                    return Err(bad(&format!("orphan moment `{}`", entry.name)));
                };
                if n != base {
                    return Err(bad(&format!("orphan moment `{}`", entry.name)));
                }
                if trainable {
                    store.insert(n.clone(), value);
                } else {
                    store.insert_frozen(n.clone(), value);
                }
                let p = store.entry_mut(&n).expect("just inserted");
                p.m = m;
                p.v = t;
            } else {
                if pending.is_some() {
                    return Err(bad("tensor without moments"));
                }
                pending = Some((entry.name.clone(), t, Array2::zeros((r, c)), entry.trainable));
            }
        }
        if pending.is_some() || cursor != bytes.len() {
            return Err(bad("trailing or incomplete data"));
        }
        store.step = header.optimizer_step;
        Ok(Checkpoint {
            arch: header.arch,
            global_step: header.global_step,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }

    pub fn arch_as<A: serde::de::DeserializeOwned>(&self) -> Result<A> {
        serde_json::from_value(self.arch.clone())
            .map_err(|e| Error::Contract(format!("incompatible checkpoint architecture: {e}")))
    }
}
