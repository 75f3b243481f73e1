//! Named-tensor archive.
//!
//! Layout: a UTF-8 JSON header `{version, entries: [{name, dtype, shape,
//! offset, nbytes}], metadata}`, one zero byte, then the concatenated
//! little-endian tensor payloads. Offsets are relative to the first payload
//! byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    entries: Vec<Entry>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

/// Element type of the tensors stored in `bytes`, `None` for an archive
/// without tensors.
pub fn stored_dtype(bytes: &[u8]) -> Result<Option<String>> {
    let split = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])?;
    Ok(header.entries.into_iter().next().map(|e| e.dtype))
}

/// In-memory archive contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl<T: Real> Archive<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len();
            for &x in t.data() {
                x.write_le(&mut payload);
            }
            entries.push(Entry {
                name: name.clone(),
                dtype: T::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() - offset,
            });
        }
        let header = Header {
            version: FORMAT_VERSION,
            entries,
            metadata: self.metadata.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(0);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == 0)
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..split])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let payload = &bytes[split + 1..];
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            if e.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "{}: stored as {}, requested {}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let n: usize = e.shape.iter().product();
            if e.nbytes != n * T::NBYTES || e.offset + e.nbytes > payload.len() {
                return Err(Error::Checkpoint(format!("{}: bad extent", e.name)));
            }
            let data = payload[e.offset..e.offset + e.nbytes]
                .chunks_exact(T::NBYTES)
                .map(T::read_le)
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Archive {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
