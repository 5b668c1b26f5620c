//! Model checkpoints: a directory holding the architecture config, the
//! vocabulary, raw little-endian parameter blobs with a JSON manifest,
//! and a provenance record with an integrity hash over the blobs.

use super::config::ModelConfig;
use super::params::ParamStore;
use super::vocab::Vocabulary;
use super::ModelError;
use crate::mat::Mat;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "params.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    /// Byte offset of this blob inside `params.bin`.
    pub offset: u64,
}

/// Where a checkpoint came from: which stage wrote it, what it was
/// initialized from, and the state of training at save time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Provenance {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// SHA-256 of `params.bin`, filled in at save time.
    #[serde(default)]
    pub params_sha256: String,
}

impl Provenance {
    /// Stage lineage ending at this checkpoint, oldest stage first.
    /// Parents written by `as_parent` encode their own lineage with `>`.
    pub fn chain(&self) -> Vec<String> {
        let mut chain: Vec<String> = self
            .parent
            .as_deref()
            .map(|p| p.split('>').map(str::to_string).collect())
            .unwrap_or_default();
        chain.push(self.stage.clone());
        chain
    }

    /// The `parent` value for a checkpoint initialized from this one.
    pub fn as_parent(&self) -> String {
        self.chain().join(">")
    }
}

pub struct Checkpoint<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
    pub provenance: Provenance,
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    config: &ModelConfig,
    vocab: &Vocabulary,
    params: &ParamStore<T>,
    provenance: &Provenance,
) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;

    let mut blob: Vec<u8> = Vec::with_capacity(params.num_scalars() * 8);
    let mut manifest: Vec<ParamEntry> = Vec::with_capacity(params.len());
    for (name, m) in params.iter() {
        manifest.push(ParamEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            dtype: "f64".to_string(),
            offset: blob.len() as u64,
        });
        for &v in m.data() {
            blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    let sha = hex_digest(&blob);

    let mut f = fs::File::create(dir.join(PARAMS_FILE))?;
    f.write_all(&blob)?;
    f.flush()?;

    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).map_err(ModelError::json)?,
    )?;
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(config).map_err(ModelError::json)?,
    )?;
    fs::write(dir.join(VOCAB_FILE), vocab.to_json())?;

    let mut prov = provenance.clone();
    prov.params_sha256 = sha;
    fs::write(
        dir.join(PROVENANCE_FILE),
        serde_json::to_string_pretty(&prov).map_err(ModelError::json)?,
    )?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>, ModelError> {
    let read = |name: &str| -> Result<String, ModelError> {
        fs::read_to_string(dir.join(name)).map_err(|e| {
            ModelError::Checkpoint(format!("{}: {e}", dir.join(name).display()))
        })
    };
    let config: ModelConfig =
        serde_json::from_str(&read(CONFIG_FILE)?).map_err(ModelError::json)?;
    let vocab = Vocabulary::from_json(&read(VOCAB_FILE)?).map_err(ModelError::json)?;
    let manifest: Vec<ParamEntry> =
        serde_json::from_str(&read(MANIFEST_FILE)?).map_err(ModelError::json)?;
    let provenance: Provenance =
        serde_json::from_str(&read(PROVENANCE_FILE)?).map_err(ModelError::json)?;

    let blob = fs::read(dir.join(PARAMS_FILE))?;
    if !provenance.params_sha256.is_empty() {
        let sha = hex_digest(&blob);
        if sha != provenance.params_sha256 {
            return Err(ModelError::Checkpoint(format!(
                "parameter hash mismatch in {}: stored {}, computed {sha}",
                dir.display(),
                provenance.params_sha256
            )));
        }
    }

    let mut params = ParamStore::new();
    for entry in &manifest {
        if entry.dtype != "f64" {
            return Err(ModelError::Checkpoint(format!(
                "unsupported dtype {} for {}",
                entry.dtype, entry.name
            )));
        }
        let count = entry.rows * entry.cols;
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > blob.len() {
            return Err(ModelError::Checkpoint(format!(
                "blob truncated: {} expects bytes {start}..{end}, file has {}",
                entry.name,
                blob.len()
            )));
        }
        let data: Vec<T> = blob[start..end]
            .chunks_exact(8)
            .map(|c| {
                T::of_f64(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ]))
            })
            .collect();
        params.insert(entry.name.clone(), Mat::from_vec(entry.rows, entry.cols, data));
    }

    Ok(Checkpoint {
        config,
        vocab,
        params,
        provenance,
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::super::params::init_model_params;
    use super::*;

    fn sample() -> (ModelConfig, Vocabulary, ParamStore<f64>) {
        let cfg = ModelConfig {
            enc_layers: 1,
            enc_heads: 2,
            enc_dim: 8,
            enc_ffn: 16,
            dec_layers: 1,
            conv_kernel: 3,
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::build(["abc def"]);
        let params = init_model_params(&cfg, 5, vocab.size(), 3);
        (cfg, vocab, params)
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, vocab, params) = sample();
        let prov = Provenance {
            stage: "baseline_supervised".into(),
            seed: 3,
            epoch: Some(4),
            ..Provenance::default()
        };
        save_checkpoint(dir.path(), &cfg, &vocab, &params, &prov).unwrap();
        let loaded: Checkpoint<f64> = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.vocab, vocab);
        assert_eq!(loaded.params, params);
        assert_eq!(loaded.provenance.stage, "baseline_supervised");
        assert_eq!(loaded.provenance.epoch, Some(4));
        assert_eq!(loaded.provenance.params_sha256.len(), 64);
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, vocab, params) = sample();
        save_checkpoint(dir.path(), &cfg, &vocab, &params, &Provenance::default()).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let mut blob = fs::read(&path).unwrap();
        blob[100] ^= 0xff;
        fs::write(&path, &blob).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(dir.path()),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn missing_file_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(dir.path()),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
