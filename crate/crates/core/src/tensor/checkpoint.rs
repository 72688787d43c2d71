//! Single-file checkpoint container: a JSON manifest followed by named f64
//! tensor payloads, all little-endian. Writing iterates parameters in name
//! order so identical stores produce identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::ParamStore;
use super::{Result, Tensor, TensorError};

const MAGIC: &[u8; 8] = b"RLNCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub seed: u64,
    /// Model topology as free-form JSON; the loader rebuilds structure from it.
    pub topology: serde_json::Value,
}

impl CheckpointManifest {
    pub fn new(seed: u64, topology: serde_json::Value) -> Self {
        CheckpointManifest { format_version: FORMAT_VERSION, seed, topology }
    }
}

pub fn save_checkpoint(path: &Path, manifest: &CheckpointManifest, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let manifest_bytes =
        serde_json::to_vec(manifest).map_err(|e| TensorError::Format(format!("manifest encode: {e}")))?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("bad magic, not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Format(format!("unsupported format version {version}")));
    }
    let manifest_len = read_u64(&mut r)? as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| TensorError::Format(format!("manifest decode: {e}")))?;
    let count = read_u64(&mut r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| TensorError::Format("tensor name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 2 {
            return Err(TensorError::Format(format!("tensor {name:?} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok((manifest, tensors))
}

/// Load a checkpoint straight into a fresh store with every parameter frozen;
/// callers mark trainable subsets afterwards.
pub fn load_into_store(path: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let (manifest, tensors) = load_checkpoint(path)?;
    let mut store = ParamStore::new();
    for (name, tensor) in tensors {
        store.insert(name, tensor, false);
    }
    Ok((manifest, store))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.insert("a.weight", Tensor::matrix(2, 3, vec![1.5, -2.25, 0.1, 4.0, -0.0, 1e-300]).unwrap(), true);
        store.insert("a.bias", Tensor::vector(vec![0.25, f64::MAX]), false);
        let manifest = CheckpointManifest::new(42, json!({"dim": 8, "tables": ["users"]}));
        save_checkpoint(&path, &manifest, &store).unwrap();
        let (m2, tensors) = load_checkpoint(&path).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(tensors.len(), 2);
        for (name, t) in store.iter() {
            let loaded = &tensors[name];
            assert_eq!(loaded.shape(), t.shape());
            for (a, b) in loaded.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn same_store_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut store = ParamStore::new();
        store.insert("z", Tensor::vector(vec![1.0]), true);
        store.insert("a", Tensor::vector(vec![2.0]), true);
        let manifest = CheckpointManifest::new(7, json!({}));
        save_checkpoint(&p1, &manifest, &store).unwrap();
        save_checkpoint(&p2, &manifest, &store).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TensorError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        save_checkpoint(&path, &CheckpointManifest::new(0, json!({})), &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
