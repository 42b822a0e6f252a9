//! Binary parameter checkpoint.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "CRLMMCK\0"
//! version  u32
//! hlen     u32      length of the JSON header
//! header   hlen bytes, {"config_hash": .., "params": [{"name": .., "shape": [..]}, ..]}
//! data     f64 values of every parameter, in manifest order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KernelError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRLMMCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    params: Vec<ManifestEntry>,
}

/// A parameter set as read back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            params: store
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config_hash: self.config_hash.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, KernelError> {
        let bad = |msg: &str| KernelError::Checkpoint(msg.to_string());
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        bytes.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(KernelError::Checkpoint(format!("unsupported version {version}")));
        }
        bytes.read_exact(&mut word).map_err(|_| bad("truncated header length"))?;
        let hlen = u32::from_le_bytes(word) as usize;
        if bytes.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[..hlen])
            .map_err(|e| KernelError::Checkpoint(format!("bad header: {e}")))?;
        bytes = &bytes[hlen..];
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            if bytes.len() < n * 8 {
                return Err(KernelError::Checkpoint(format!("truncated data for `{}`", entry.name)));
            }
            let data = bytes[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            bytes = &bytes[n * 8..];
            params.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config_hash: header.config_hash,
            params,
        })
    }

    /// Copies values into a store with the same manifest.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), KernelError> {
        if self.params.len() != store.len() {
            return Err(KernelError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .lookup(name)
                .ok_or_else(|| KernelError::Checkpoint(format!("unknown parameter `{name}`")))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(KernelError::ShapeMismatch {
                    op: "restore",
                    left: dst.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            dst.clone_from(t);
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config_hash: &str) -> Result<(), KernelError> {
    let bytes = Checkpoint::from_store(store, config_hash).to_bytes();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, KernelError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..4) {
            let cols = values.len();
            let mut store = ParamStore::new();
            store.add("a", Tensor::matrix(1, cols, values.clone()));
            store.add("b.weight", Tensor::matrix(rows, 2, vec![0.5; rows * 2]));
            let ck = Checkpoint::from_store(&store, "abc123");
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.config_hash, "abc123");
            prop_assert_eq!(back.params, ck.params);
        }
    }

    #[test]
    fn header_is_little_endian() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0));
        let bytes = Checkpoint::from_store(&store, "h").to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[bytes.len() - 8..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut store = ParamStore::new();
        store.add("w", Tensor::matrix(2, 2, vec![1.0; 4]));
        let mut bytes = Checkpoint::from_store(&store, "h").to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
