//! Self-supervised pretraining support: encoder-layer feature dumping,
//! cluster-model fitting over standardized features, frame-target
//! generation, and the on-disk formats for both.

use crate::cluster::{kmeans_assign, kmeans_fit, ClusterError, KmeansFit};
use crate::features::{apply_cmvn, estimate_cmvn, CmvnStats, FeatureMatrix};
use crate::mat::Mat;
use crate::model::{ModelConfig, ModelError, Network, ParamStore};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SslError {
    #[error("layer {layer} out of range; encoder has layers 0..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("cluster error: {0}")]
    Cluster(#[from] ClusterError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("{utt_id}: {targets} cluster targets for {frames} encoder frames (beyond the ±1 tolerance)")]
    LengthMismatch {
        utt_id: String,
        targets: usize,
        frames: usize,
    },
    #[error("no cluster targets for utterance {0}")]
    MissingTargets(String),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// k-means centroids plus the standardization applied before clustering.
#[derive(Debug, Clone)]
pub struct ClusterModel<T: Scalar> {
    pub centroids: Mat<T>,
    pub source_layer: usize,
    pub stats: CmvnStats<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct ClusterSidecar<T: Scalar> {
    k: usize,
    dim: usize,
    source_layer: usize,
    stats: CmvnStats<T>,
}

impl<T: Scalar> ClusterModel<T> {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Standardize rows with the stored stats, then assign each row to
    /// its nearest centroid.
    pub fn assign(&self, layer_features: &Mat<T>) -> Result<Vec<u32>, SslError> {
        let fm = FeatureMatrix {
            utt_id: String::new(),
            frames: layer_features.clone(),
            frame_shift_s: 0.0,
            frame_length_s: 0.0,
        };
        let z = apply_cmvn(&fm, &self.stats);
        Ok(kmeans_assign(&self.centroids, &z.frames)?)
    }
}

/// Eval-mode activations after encoder layer `layer` (0 = front-end
/// output, `enc_layers` = final encoder output).
pub fn encoder_layer_output<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    feats: &Mat<T>,
    layer: usize,
) -> Result<Mat<T>, SslError> {
    if layer > cfg.enc_layers {
        return Err(SslError::LayerOutOfRange {
            layer,
            max: cfg.enc_layers,
        });
    }
    let mut net = Network::new_eval(cfg);
    let out = net.encode(params, feats, None)?;
    Ok(net.value(out.layer_ids[layer]).clone())
}

/// Pool per-utterance layer features into one fitting sample, capped at
/// `max_frames` rows by seeded uniform subsampling (row order preserved).
pub fn pool_fitting_sample<T: Scalar>(
    per_utt: &[Mat<T>],
    max_frames: usize,
    seed: u64,
) -> Mat<T> {
    let total: usize = per_utt.iter().map(Mat::rows).sum();
    let dim = per_utt.first().map_or(0, Mat::cols);
    let keep: Option<Vec<bool>> = if max_frames > 0 && total > max_frames {
        let mut idx: Vec<usize> = (0..total).collect();
        idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed ^ 0x5A5A_1234_ABCD_0001));
        let mut mask = vec![false; total];
        for &i in idx.iter().take(max_frames) {
            mask[i] = true;
        }
        Some(mask)
    } else {
        None
    };
    let rows_kept = keep
        .as_ref()
        .map_or(total, |m| m.iter().filter(|&&b| b).count());
    let mut out = Mat::zeros(rows_kept, dim);
    let mut src_row = 0usize;
    let mut dst_row = 0usize;
    for m in per_utt {
        for r in 0..m.rows() {
            let kept = keep.as_ref().map_or(true, |mask| mask[src_row]);
            if kept {
                out.row_mut(dst_row).copy_from_slice(m.row(r));
                dst_row += 1;
            }
            src_row += 1;
        }
    }
    out
}

/// Standardize the sample per dimension, then fit k-means on it.
pub fn fit_cluster_model<T: Scalar>(
    sample: &Mat<T>,
    source_layer: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(ClusterModel<T>, KmeansFit<T>), SslError> {
    let fm = FeatureMatrix {
        utt_id: String::new(),
        frames: sample.clone(),
        frame_shift_s: 0.0,
        frame_length_s: 0.0,
    };
    let stats = estimate_cmvn([&fm]);
    let z = apply_cmvn(&fm, &stats);
    let fit = kmeans_fit(&z.frames, k, seed, max_iters)?;
    Ok((
        ClusterModel {
            centroids: fit.centroids.clone(),
            source_layer,
            stats,
        },
        fit,
    ))
}

fn sidecar_path(bin_path: &Path) -> PathBuf {
    let mut os = bin_path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Binary centroid matrix (little-endian f64 rows) plus a JSON sidecar
/// carrying k, dimension, source layer, and the standardization stats.
pub fn save_cluster_model<T: Scalar>(
    bin_path: &Path,
    model: &ClusterModel<T>,
) -> Result<(), SslError> {
    if let Some(parent) = bin_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(model.centroids.data().len() * 8);
    for &v in model.centroids.data() {
        bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    fs::write(bin_path, bytes)?;
    let sidecar = ClusterSidecar {
        k: model.k(),
        dim: model.dim(),
        source_layer: model.source_layer,
        stats: model.stats.clone(),
    };
    fs::write(
        sidecar_path(bin_path),
        serde_json::to_string_pretty(&sidecar).map_err(|e| SslError::Format {
            path: sidecar_path(bin_path),
            msg: e.to_string(),
        })?,
    )?;
    Ok(())
}

pub fn load_cluster_model<T: Scalar>(bin_path: &Path) -> Result<ClusterModel<T>, SslError> {
    let side = sidecar_path(bin_path);
    let sidecar: ClusterSidecar<T> = serde_json::from_str(
        &fs::read_to_string(&side).map_err(|e| SslError::Format {
            path: side.clone(),
            msg: e.to_string(),
        })?,
    )
    .map_err(|e| SslError::Format {
        path: side.clone(),
        msg: e.to_string(),
    })?;
    let bytes = fs::read(bin_path)?;
    let expect = sidecar.k * sidecar.dim * 8;
    if bytes.len() != expect {
        return Err(SslError::Format {
            path: bin_path.to_path_buf(),
            msg: format!("expected {expect} bytes for {}x{}, found {}", sidecar.k, sidecar.dim, bytes.len()),
        });
    }
    let data: Vec<T> = bytes
        .chunks_exact(8)
        .map(|c| {
            T::of_f64(f64::from_le_bytes([
                c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
            ]))
        })
        .collect();
    Ok(ClusterModel {
        centroids: Mat::from_vec(sidecar.k, sidecar.dim, data),
        source_layer: sidecar.source_layer,
        stats: sidecar.stats,
    })
}

/// Frame-level cluster ids per utterance, stored as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterTargets {
    labels: BTreeMap<String, Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct TargetLine {
    utt_id: String,
    labels: Vec<u32>,
}

impl ClusterTargets {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, utt_id: impl Into<String>, labels: Vec<u32>) {
        self.labels.insert(utt_id.into(), labels);
    }

    pub fn get(&self, utt_id: &str) -> Result<&[u32], SslError> {
        self.labels
            .get(utt_id)
            .map(Vec::as_slice)
            .ok_or_else(|| SslError::MissingTargets(utt_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u32])> {
        self.labels.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), SslError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (utt_id, labels) in &self.labels {
            let line = TargetLine {
                utt_id: utt_id.clone(),
                labels: labels.clone(),
            };
            writeln!(
                w,
                "{}",
                serde_json::to_string(&line).map_err(|e| SslError::Format {
                    path: path.to_path_buf(),
                    msg: e.to_string(),
                })?
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, SslError> {
        let mut out = ClusterTargets::new();
        let reader = BufReader::new(fs::File::open(path)?);
        for (no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TargetLine =
                serde_json::from_str(&line).map_err(|e| SslError::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {}: {e}", no + 1),
                })?;
            out.labels.insert(parsed.utt_id, parsed.labels);
        }
        Ok(out)
    }
}

/// Usable frame count when targets and encoder frames disagree: equal or
/// off by one truncates to the shorter side; anything else is an error.
pub fn reconcile_target_len(
    utt_id: &str,
    targets: usize,
    frames: usize,
) -> Result<usize, SslError> {
    if targets.abs_diff(frames) <= 1 {
        Ok(targets.min(frames))
    } else {
        Err(SslError::LengthMismatch {
            utt_id: utt_id.to_string(),
            targets,
            frames,
        })
    }
}

/// Fraction of frames whose predicted cluster matches the target.
pub fn frame_accuracy<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    feats: &Mat<T>,
    targets: &[u32],
) -> Result<(usize, usize), SslError> {
    let mut net = Network::new_eval(cfg);
    let enc = net.encode(params, feats, None)?;
    let lp = net.ssl_log_probs(params, enc.final_id)?;
    let probs = net.value(lp);
    let usable = reconcile_target_len("", targets.len(), probs.rows())?;
    let mut hits = 0usize;
    for t in 0..usable {
        let row = probs.row(t);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == targets[t] as usize {
            hits += 1;
        }
    }
    Ok((hits, usable))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model_params;
    use rand::Rng;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Mat::from_vec(r, c, data)
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            enc_heads: 2,
            enc_dim: 8,
            enc_ffn: 16,
            dec_layers: 1,
            conv_kernel: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn layer_output_bounds_and_final_equivalence() {
        let cfg = tiny_cfg();
        let params = init_model_params::<f64>(&cfg, 5, 10, 1);
        let feats = rand_mat(100, 5, 2);
        let last = encoder_layer_output(&cfg, &params, &feats, cfg.enc_layers).unwrap();
        assert_eq!(last.rows(), 25);
        let mut net = Network::new_eval(&cfg);
        let enc = net.encode(&params, &feats, None).unwrap();
        assert_eq!(&last, net.value(enc.final_id));

        let front = encoder_layer_output(&cfg, &params, &feats, 0).unwrap();
        assert_eq!(front.rows(), 25);
        assert_ne!(front, last);

        assert!(matches!(
            encoder_layer_output(&cfg, &params, &feats, 3),
            Err(SslError::LayerOutOfRange { layer: 3, max: 2 })
        ));
    }

    #[test]
    fn identical_audio_gives_identical_features() {
        let cfg = tiny_cfg();
        let params = init_model_params::<f64>(&cfg, 5, 10, 1);
        let feats = rand_mat(40, 5, 3);
        let a = encoder_layer_output(&cfg, &params, &feats, 1).unwrap();
        let b = encoder_layer_output(&cfg, &params, &feats, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pooling_respects_cap_and_is_deterministic() {
        let per_utt = vec![rand_mat(30, 4, 1), rand_mat(50, 4, 2), rand_mat(20, 4, 3)];
        let full = pool_fitting_sample(&per_utt, 0, 7);
        assert_eq!(full.rows(), 100);
        assert_eq!(full.row(0), per_utt[0].row(0));
        assert_eq!(full.row(99), per_utt[2].row(19));
        let capped = pool_fitting_sample(&per_utt, 40, 7);
        assert_eq!(capped.rows(), 40);
        assert_eq!(capped, pool_fitting_sample(&per_utt, 40, 7));
        assert_ne!(capped, pool_fitting_sample(&per_utt, 40, 8));
    }

    #[test]
    fn cluster_model_round_trip_and_assignment() {
        let sample = rand_mat(200, 6, 5);
        let (model, fit) = fit_cluster_model(&sample, 1, 8, 5, 40).unwrap();
        assert_eq!(model.k(), 8);
        assert_eq!(model.dim(), 6);
        // assigning the fitting sample reproduces the fit labels
        assert_eq!(model.assign(&sample).unwrap(), fit.labels);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("centroids.bin");
        save_cluster_model(&path, &model).unwrap();
        assert!(dir.path().join("centroids.bin.json").is_file());
        let loaded: ClusterModel<f64> = load_cluster_model(&path).unwrap();
        assert_eq!(loaded.centroids, model.centroids);
        assert_eq!(loaded.source_layer, 1);
        assert_eq!(loaded.assign(&sample).unwrap(), fit.labels);
    }

    #[test]
    fn truncated_centroid_file_is_rejected() {
        let sample = rand_mat(50, 3, 9);
        let (model, _) = fit_cluster_model(&sample, 0, 4, 9, 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("centroids.bin");
        save_cluster_model(&path, &model).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_cluster_model::<f64>(&path),
            Err(SslError::Format { .. })
        ));
    }

    #[test]
    fn targets_jsonl_round_trip() {
        let mut t = ClusterTargets::new();
        t.insert("utt_b", vec![1, 2, 3]);
        t.insert("utt_a", vec![0, 0, 7, 7]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("targets.jsonl");
        t.write_jsonl(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // sorted output, one JSON object per line
        let first: serde_json::Value =
            serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["utt_id"], "utt_a");
        assert_eq!(first["labels"][2], 7);
        let back = ClusterTargets::read_jsonl(&path).unwrap();
        assert_eq!(back, t);
        assert!(matches!(
            back.get("nope"),
            Err(SslError::MissingTargets(_))
        ));
    }

    #[test]
    fn length_reconciliation_rules() {
        assert_eq!(reconcile_target_len("u", 25, 25).unwrap(), 25);
        assert_eq!(reconcile_target_len("u", 24, 25).unwrap(), 24);
        assert_eq!(reconcile_target_len("u", 26, 25).unwrap(), 25);
        assert!(matches!(
            reconcile_target_len("u", 23, 25),
            Err(SslError::LengthMismatch { .. })
        ));
    }
}
