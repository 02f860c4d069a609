//! Single-file checkpoint format.
//!
//! ```text
//! "PNEU" | u32 version | u64 header length | header JSON | f32 blobs
//! ```
//!
//! All integers and floats are little-endian. The header is canonical JSON
//! (sorted keys, no whitespace) holding the architecture, metadata and a
//! tensor directory; each directory entry gives the tensor's byte offset
//! (relative to the end of the header) and byte length.

use std::fs;
use std::path::Path;

use pneunet_core::model::{Architecture, ModelGraph};
use pneunet_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PNEU";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    /// Epoch the weights come from (0 for untrained).
    pub epoch: u64,
    pub best_val_loss: Option<f64>,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
}

impl Metadata {
    /// Honours `SOURCE_DATE_EPOCH` so repeated runs can produce identical files.
    pub fn now(epoch: u64, best_val_loss: Option<f64>, seed: u64) -> Self {
        let created_unix = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            });
        Self {
            epoch,
            best_val_loss,
            seed,
            created_unix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: Architecture,
    metadata: Metadata,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelGraph,
    pub metadata: Metadata,
}

fn canonical_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    // `Value` objects are BTreeMaps, so re-serializing sorts every key.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_vec(&v)?)
}

pub fn to_bytes(model: &ModelGraph, metadata: &Metadata) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(model.params().len());
    let mut offset = 0u64;
    for p in model.params().iter() {
        let length = 4 * p.tensor.len() as u64;
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset,
            length,
            trainable: p.trainable,
        });
        offset += length;
    }
    let header = canonical_json(&Header {
        architecture: model.architecture().clone(),
        metadata: metadata.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params().iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREFIX {
        return Err(Error::Truncated("file ends inside the fixed prefix".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body_start = (PREFIX as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::Truncated("file ends inside the header".into()))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..body_start])
        .map_err(|e| Error::Header(e.to_string()))?;
    let body = &bytes[body_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.length != 4 * numel as u64 {
            return Err(Error::Header(format!(
                "{}: length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= body.len() as u64)
            .ok_or_else(|| Error::Truncated(format!("tensor {} is cut short", e.name)))?;
        let raw = &body[e.offset as usize..end as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
    }
    let mut model = ModelGraph::from_parts(header.architecture, tensors)?;
    for e in &header.tensors {
        model.set_trainable(&e.name, e.trainable)?;
    }
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

pub fn save(path: &Path, model: &ModelGraph, metadata: &Metadata) -> Result<()> {
    let bytes = to_bytes(model, metadata)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Short content hash identifying a checkpoint file.
pub fn version_tag(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use pneunet_core::model::ModelConfig;

    fn model() -> ModelGraph {
        let cfg = ModelConfig {
            input_shape: [1, 32, 32],
            ..ModelConfig::default()
        };
        let mut m = ModelGraph::build(&cfg, 3).unwrap();
        m.freeze_backbone();
        m
    }

    fn meta() -> Metadata {
        Metadata {
            epoch: 7,
            best_val_loss: Some(0.25),
            seed: 3,
            created_unix: 1_700_000_000,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = to_bytes(&m, &meta()).unwrap();
        let ck = from_bytes(&bytes).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.metadata, meta());
        assert_eq!(to_bytes(&ck.model, &ck.metadata).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&model(), &meta()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::BadMagic)));
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            from_bytes(&newer),
            Err(Error::Version {
                found: 2,
                supported: 1
            })
        ));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(from_bytes(&bytes[..20]), Err(Error::Truncated(_))));
        assert!(matches!(from_bytes(b"PN"), Err(Error::BadMagic)));
    }

    #[test]
    fn header_is_canonical_json() {
        let bytes = to_bytes(&model(), &meta()).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = &bytes[16..16 + len];
        let v: serde_json::Value = serde_json::from_slice(header).unwrap();
        assert_eq!(serde_json::to_vec(&v).unwrap(), header);
        assert_eq!(v["metadata"]["epoch"], 7);
    }

    #[test]
    fn version_tag_is_stable() {
        assert_eq!(version_tag(b"abc"), "ba7816bf8f01");
    }
}
