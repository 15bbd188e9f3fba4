//! Weight blobs and their metadata sidecars.
//!
//! A checkpoint is two files: `<name>.ckpt`, a little-endian `f64` blob with a
//! short header, and `<name>.ckpt.json`, the metadata record that lets the
//! model be rebuilt and the blob verified.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelBundle, ModelConfig, ModelDims};
use crate::error::{Error, Result};
use crate::nn::Segment;

const MAGIC: &[u8; 8] = b"SFWTS\x00\x01\x00";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: String,
    pub dims: ModelDims,
    pub config_hash: String,
    pub config: ModelConfig,
    pub param_count: usize,
    pub segments: Vec<Segment>,
    pub blob_sha256: String,
    /// Free-form context (phase, epoch, seed, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_blob(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a weight blob"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + 8 * n {
        return Err(bad("truncated weight blob"));
    }
    Ok(bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl ModelBundle {
    pub fn checkpoint_meta(&self, extra: serde_json::Value) -> Result<CheckpointMeta> {
        let params = self.params()?;
        Ok(CheckpointMeta {
            model: self.name().to_string(),
            dims: self.dims(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            param_count: params.len(),
            segments: self.layout().segments.clone(),
            blob_sha256: hex::encode(Sha256::digest(encode_blob(params))),
            extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<CheckpointMeta> {
        self.save_with(path, serde_json::Value::Null)
    }

    pub fn save_with(&self, path: &Path, extra: serde_json::Value) -> Result<CheckpointMeta> {
        let meta = self.checkpoint_meta(extra)?;
        write_atomic(path, &encode_blob(self.params()?))?;
        write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&meta)?)?;
        Ok(meta)
    }

    /// Rebuilds the model from the sidecar config and loads the blob.
    pub fn load(path: &Path) -> Result<ModelBundle> {
        let meta = read_meta(path)?;
        let mut bundle = ModelBundle::new(meta.config.clone())?;
        bundle.load_weights(path, &meta)?;
        Ok(bundle)
    }

    /// Loads weights into an already-built model whose config must match.
    pub fn load_weights(&mut self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let fail = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m,
        };
        if meta.config_hash != meta.config.hash() {
            return Err(fail("sidecar config hash does not match its config".into()));
        }
        if meta.config_hash != self.config.hash() {
            return Err(fail(format!(
                "checkpoint is for config {}, model has {}",
                meta.config_hash,
                self.config.hash()
            )));
        }
        if meta.segments != self.layout().segments || meta.dims != self.dims() {
            return Err(fail("weight shapes do not match the configured dimensions".into()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != meta.blob_sha256 {
            return Err(fail("weight blob checksum mismatch".into()));
        }
        let values = decode_blob(&bytes, path)?;
        if values.len() != meta.param_count {
            return Err(fail(format!(
                "expected {} parameters, blob has {}",
                meta.param_count,
                values.len()
            )));
        }
        self.set_params(values)
    }
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}
