use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamRegistry};

const MAGIC: &[u8; 4] = b"PMCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model_config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the payload, counted in f64 elements.
    offset: usize,
}

/// A checkpoint read back from disk: the embedded model config plus
/// every parameter tensor by name.
#[derive(Debug)]
pub struct CheckpointData {
    pub model_config: serde_json::Value,
    pub params: Vec<(String, usize, usize, Vec<f64>)>,
}

impl CheckpointData {
    pub fn get(&self, name: &str) -> Option<&(String, usize, usize, Vec<f64>)> {
        self.params.iter().find(|(n, _, _, _)| n == name)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> NumericsError {
    NumericsError::CheckpointIo {
        path: path.display().to_string(),
        source,
    }
}

/// Serialize the registry with an embedded model config.
///
/// Layout: magic, u32 version, u64 manifest length, manifest JSON,
/// little-endian f64 payload. The file is written to a sibling temp path
/// and renamed into place so readers never observe a partial write.
pub fn save_checkpoint(
    path: &Path,
    model_config: &serde_json::Value,
    params: &ParamRegistry,
) -> Result<(), NumericsError> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in params.iter() {
        let (rows, cols) = tensor.shape();
        entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            offset,
        });
        for v in tensor.value() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += rows * cols;
    }
    let manifest = Manifest {
        version: VERSION,
        model_config: model_config.clone(),
        params: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| NumericsError::CheckpointCorrupt(e.to_string()))?;

    let mut bytes = Vec::with_capacity(16 + manifest_bytes.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_bytes);
    bytes.extend_from_slice(&payload);

    let tmp = path.with_extension("tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let mut file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| io_err(&tmp, e))?;
    file.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, NumericsError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(NumericsError::CheckpointCorrupt(
            "missing checkpoint magic".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(NumericsError::CheckpointCorrupt(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(NumericsError::CheckpointCorrupt(
            "truncated manifest".into(),
        ));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| NumericsError::CheckpointCorrupt(e.to_string()))?;
    let payload = &bytes[16 + manifest_len..];

    let mut params = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let count = entry.rows * entry.cols;
        let start = entry.offset * 8;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(NumericsError::CheckpointCorrupt(format!(
                "parameter '{}' runs past the payload",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((entry.name.clone(), entry.rows, entry.cols, data));
    }
    Ok(CheckpointData {
        model_config: manifest.model_config,
        params,
    })
}

/// Copy checkpoint values into an existing registry, matching by name
/// and shape.
pub fn restore_registry(
    data: &CheckpointData,
    params: &ParamRegistry,
) -> Result<(), NumericsError> {
    for (name, tensor) in params.iter() {
        let entry = data.get(name).ok_or_else(|| {
            NumericsError::CheckpointCorrupt(format!("missing parameter '{name}'"))
        })?;
        let (rows, cols) = tensor.shape();
        if (entry.1, entry.2) != (rows, cols) {
            return Err(NumericsError::CheckpointCorrupt(format!(
                "parameter '{name}' has shape {}x{}, expected {rows}x{cols}",
                entry.1, entry.2
            )));
        }
        tensor.set_data(&entry.3);
    }
    Ok(())
}
