//! Checkpoint IO: a JSON manifest describing the tensor layout and run
//! configuration, next to one raw little-endian buffer file.
//!
//! Tensors are written in sorted name order at stated byte offsets, so
//! saving the same store twice produces byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Elem, ParameterStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "weights.bin";
const FORMAT_TAG: &str = "useg-checkpoint-v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    data_file: String,
    config: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

fn elem_width<T: Elem>() -> u64 {
    match T::DTYPE {
        "f32" => 4,
        _ => 8,
    }
}

fn push_elems<T: Elem>(buf: &mut Vec<u8>, data: &[T]) {
    if T::DTYPE == "f32" {
        for v in data {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    } else {
        for v in data {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
}

fn read_elems<T: Elem>(bytes: &[u8]) -> Vec<T> {
    if T::DTYPE == "f32" {
        bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    }
}

/// Write `manifest.json` and `weights.bin` under `dir`, creating it if
/// needed. `config` is embedded verbatim in the manifest.
pub fn save_checkpoint<T: Elem>(
    dir: &Path,
    store: &ParameterStore<T>,
    config: &serde_json::Value,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let width = elem_width::<T>();
    let mut entries = Vec::with_capacity(store.len());
    let mut buf: Vec<u8> = Vec::with_capacity(store.total_elements() * width as usize);
    for (name, tensor) in store.iter() {
        let byte_offset = buf.len() as u64;
        push_elems(&mut buf, tensor.data());
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            byte_offset,
            byte_len: buf.len() as u64 - byte_offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        data_file: DATA_FILE.to_string(),
        config: config.clone(),
        tensors: entries,
    };
    fs::write(dir.join(DATA_FILE), &buf)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Read a checkpoint saved by [`save_checkpoint`]. The stored dtype must
/// match `T`; shapes and byte ranges are validated against the buffer.
pub fn load_checkpoint<T: Elem>(
    dir: &Path,
) -> Result<(ParameterStore<T>, serde_json::Value), CheckpointError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != FORMAT_TAG {
        return Err(CheckpointError::Manifest(format!(
            "unsupported format `{}`",
            manifest.format
        )));
    }
    let bytes = fs::read(dir.join(&manifest.data_file))?;
    let width = elem_width::<T>();
    let mut store = ParameterStore::new();
    for entry in &manifest.tensors {
        if entry.dtype != T::DTYPE {
            return Err(CheckpointError::Manifest(format!(
                "tensor `{}` has dtype {}, expected {}",
                entry.name,
                entry.dtype,
                T::DTYPE
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.byte_len != numel as u64 * width {
            return Err(CheckpointError::Manifest(format!(
                "tensor `{}`: shape {:?} disagrees with byte length {}",
                entry.name, entry.shape, entry.byte_len
            )));
        }
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_len as usize;
        if end > bytes.len() {
            return Err(CheckpointError::Manifest(format!(
                "tensor `{}` extends past the data file",
                entry.name
            )));
        }
        let data = read_elems::<T>(&bytes[start..end]);
        let tensor = Tensor::from_vec(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if store.contains(&entry.name) {
            return Err(CheckpointError::Manifest(format!(
                "duplicate tensor `{}`",
                entry.name
            )));
        }
        store.insert(&entry.name, tensor);
    }
    Ok((store, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_store() -> ParameterStore<f32> {
        let mut store = ParameterStore::new();
        store.insert(
            "enc.w",
            Tensor::from_vec(vec![2, 2], vec![1.0, -2.5, 0.0, 4.25]).unwrap(),
        );
        store.insert("enc.b", Tensor::from_vec(vec![2], vec![0.5, -0.5]).unwrap());
        store
    }

    #[test]
    fn roundtrip_preserves_values_and_config() {
        let dir = tempdir().unwrap();
        let store = sample_store();
        let config = serde_json::json!({"image_size": 64, "state_dim": 8});
        save_checkpoint(dir.path(), &store, &config).unwrap();
        let (loaded, cfg) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(cfg, config);
        assert_eq!(loaded.len(), 2);
        for (name, t) in store.iter() {
            assert_eq!(loaded.get(name).unwrap().data(), t.data());
            assert_eq!(loaded.get(name).unwrap().shape(), t.shape());
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let store = sample_store();
        let config = serde_json::json!({"seed": 17});
        save_checkpoint(d1.path(), &store, &config).unwrap();
        save_checkpoint(d2.path(), &store, &config).unwrap();
        for f in [MANIFEST_FILE, DATA_FILE] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical saves");
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        save_checkpoint(dir.path(), &sample_store(), &serde_json::Value::Null).unwrap();
        let err = load_checkpoint::<f64>(dir.path());
        assert!(matches!(err, Err(CheckpointError::Manifest(_))));
    }

    #[test]
    fn truncated_buffer_is_rejected() {
        let dir = tempdir().unwrap();
        save_checkpoint(dir.path(), &sample_store(), &serde_json::Value::Null).unwrap();
        let data_path = dir.path().join(DATA_FILE);
        let bytes = std::fs::read(&data_path).unwrap();
        std::fs::write(&data_path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }
}
