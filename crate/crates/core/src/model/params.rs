//! Named parameter storage and initialization.
//!
//! Parameters live in a sorted name → matrix map so that iteration order,
//! serialization order, and random initialization order are all stable.

use super::config::ModelConfig;
use super::ModelError;
use crate::mat::Mat;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Mat<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Mat<T>, ModelError> {
        self.map
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat<T>, ModelError> {
        self.map
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat<T>> {
        self.map.remove(name)
    }

    /// Drop every parameter whose name starts with `prefix`; returns how
    /// many were removed.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let doomed: Vec<String> = self
            .map
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        for k in &doomed {
            self.map.remove(k);
        }
        doomed.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|m| m.data().len()).sum()
    }

    /// Copy every parameter under `prefix` from `other`, requiring shape
    /// agreement with any existing entry of the same name.
    pub fn adopt_prefix(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize, ModelError> {
        let mut copied = 0;
        for (name, value) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            if let Some(existing) = self.map.get(name) {
                if existing.shape() != value.shape() {
                    return Err(ModelError::ShapeMismatch {
                        name: name.to_string(),
                        want: existing.shape(),
                        got: value.shape(),
                    });
                }
            }
            self.map.insert(name.to_string(), value.clone());
            copied += 1;
        }
        Ok(copied)
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Mat::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zero,
    One,
}

/// Full list of (name, shape, init) for a supervised encoder-decoder model.
pub fn param_specs(
    cfg: &ModelConfig,
    n_mels: usize,
    vocab_size: usize,
) -> Vec<(String, (usize, usize), Init)> {
    let d = cfg.enc_dim;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: (usize, usize), init: Init| {
        specs.push((name, shape, init));
    };

    // convolutional subsampler: two stride-2 stages as unfold + matmul
    push("enc.sub1.w".into(), (3 * n_mels, d), Init::Xavier);
    push("enc.sub1.b".into(), (1, d), Init::Zero);
    push("enc.sub2.w".into(), (3 * d, d), Init::Xavier);
    push("enc.sub2.b".into(), (1, d), Init::Zero);

    let linear = |push: &mut dyn FnMut(String, (usize, usize), Init),
                  prefix: &str,
                  inp: usize,
                  out: usize| {
        push(format!("{prefix}.w"), (inp, out), Init::Xavier);
        push(format!("{prefix}.b"), (1, out), Init::Zero);
    };
    let norm = |push: &mut dyn FnMut(String, (usize, usize), Init), prefix: &str, dim: usize| {
        push(format!("{prefix}.g"), (1, dim), Init::One);
        push(format!("{prefix}.b"), (1, dim), Init::Zero);
    };
    let attention = |push: &mut dyn FnMut(String, (usize, usize), Init), prefix: &str| {
        for part in ["q", "k", "v", "o"] {
            push(format!("{prefix}.{part}.w"), (d, d), Init::Xavier);
            push(format!("{prefix}.{part}.b"), (1, d), Init::Zero);
        }
    };
    let ffn = |push: &mut dyn FnMut(String, (usize, usize), Init), prefix: &str| {
        push(format!("{prefix}.w1"), (d, cfg.enc_ffn), Init::Xavier);
        push(format!("{prefix}.b1"), (1, cfg.enc_ffn), Init::Zero);
        push(format!("{prefix}.w2"), (cfg.enc_ffn, d), Init::Xavier);
        push(format!("{prefix}.b2"), (1, d), Init::Zero);
    };

    for l in 0..cfg.enc_layers {
        let p = format!("enc.l{l}");
        norm(&mut push, &format!("{p}.ffn1.ln"), d);
        ffn(&mut push, &format!("{p}.ffn1"));
        norm(&mut push, &format!("{p}.attn.ln"), d);
        attention(&mut push, &format!("{p}.attn"));
        norm(&mut push, &format!("{p}.conv.ln"), d);
        linear(&mut push, &format!("{p}.conv.pw1"), d, 2 * d);
        push(format!("{p}.conv.dw.w"), (cfg.conv_kernel, d), Init::Xavier);
        norm(&mut push, &format!("{p}.conv.norm"), d);
        linear(&mut push, &format!("{p}.conv.pw2"), d, d);
        norm(&mut push, &format!("{p}.ffn2.ln"), d);
        ffn(&mut push, &format!("{p}.ffn2"));
        norm(&mut push, &format!("{p}.out.ln"), d);
    }

    // CTC head starts at zero so the initial output is uniform
    push("ctc_head.w".into(), (d, vocab_size), Init::Zero);
    push("ctc_head.b".into(), (1, vocab_size), Init::Zero);

    push("dec.embed".into(), (vocab_size, d), Init::Xavier);
    for l in 0..cfg.dec_layers {
        let p = format!("dec.l{l}");
        norm(&mut push, &format!("{p}.self.ln"), d);
        attention(&mut push, &format!("{p}.self"));
        norm(&mut push, &format!("{p}.cross.ln"), d);
        attention(&mut push, &format!("{p}.cross"));
        norm(&mut push, &format!("{p}.ffn.ln"), d);
        ffn(&mut push, &format!("{p}.ffn"));
    }
    norm(&mut push, "dec.final_ln", d);
    push("dec.out.w".into(), (d, vocab_size), Init::Zero);
    push("dec.out.b".into(), (1, vocab_size), Init::Zero);

    specs
}

fn init_mat<T: Scalar>(
    rng: &mut ChaCha20Rng,
    shape: (usize, usize),
    init: Init,
) -> Mat<T> {
    match init {
        Init::Zero => Mat::zeros(shape.0, shape.1),
        Init::One => Mat::filled(shape.0, shape.1, T::one()),
        Init::Xavier => {
            let bound = (6.0 / (shape.0 + shape.1) as f64).sqrt();
            let data: Vec<T> = (0..shape.0 * shape.1)
                .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
                .collect();
            Mat::from_vec(shape.0, shape.1, data)
        }
    }
}

/// Build a freshly initialized supervised model.
pub fn init_model_params<T: Scalar>(
    cfg: &ModelConfig,
    n_mels: usize,
    vocab_size: usize,
    seed: u64,
) -> ParamStore<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in param_specs(cfg, n_mels, vocab_size) {
        store.insert(name, init_mat(&mut rng, shape, init));
    }
    store
}

/// Attach the frame-classification head (and learned mask vector) used
/// during cluster-target pretraining.
pub fn add_ssl_params<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    n_mels: usize,
    num_clusters: usize,
    seed: u64,
) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x55_1155_1155);
    store.insert("ssl_head.w", init_mat(&mut rng, (cfg.enc_dim, num_clusters), Init::Zero));
    store.insert("ssl_head.b", init_mat(&mut rng, (1, num_clusters), Init::Zero));
    store.insert("ssl_mask.embed", init_mat(&mut rng, (1, n_mels), Init::Xavier));
}

/// Check that every expected parameter exists with the expected shape.
pub fn validate_params<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    n_mels: usize,
    vocab_size: usize,
) -> Result<(), ModelError> {
    for (name, shape, _) in param_specs(cfg, n_mels, vocab_size) {
        let m = store.get(&name)?;
        if m.shape() != shape {
            return Err(ModelError::ShapeMismatch {
                name,
                want: shape,
                got: m.shape(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::default();
        let a: ParamStore<f64> = init_model_params(&cfg, 80, 30, 7);
        let b: ParamStore<f64> = init_model_params(&cfg, 80, 30, 7);
        let c: ParamStore<f64> = init_model_params(&cfg, 80, 30, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        validate_params(&a, &cfg, 80, 30).unwrap();
    }

    #[test]
    fn output_heads_start_at_zero() {
        let cfg = ModelConfig::default();
        let store: ParamStore<f64> = init_model_params(&cfg, 80, 30, 7);
        for name in ["ctc_head.w", "ctc_head.b", "dec.out.w", "dec.out.b"] {
            assert!(store.get(name).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn remove_prefix_strips_decoder() {
        let cfg = ModelConfig::default();
        let mut store: ParamStore<f64> = init_model_params(&cfg, 80, 30, 7);
        let n = store.remove_prefix("dec.");
        assert!(n > 0);
        assert!(store.names().all(|n| !n.starts_with("dec.")));
        assert!(validate_params(&store, &cfg, 80, 30).is_err());
    }

    #[test]
    fn adopt_prefix_copies_encoder_between_models() {
        let cfg = ModelConfig::default();
        let src: ParamStore<f64> = init_model_params(&cfg, 80, 30, 1);
        let mut dst: ParamStore<f64> = init_model_params(&cfg, 80, 30, 2);
        assert_ne!(src.get("enc.sub1.w").unwrap(), dst.get("enc.sub1.w").unwrap());
        let n = dst.adopt_prefix(&src, "enc.").unwrap();
        assert!(n > 0);
        assert_eq!(src.get("enc.sub1.w").unwrap(), dst.get("enc.sub1.w").unwrap());
        // decoder untouched
        assert_ne!(src.get("dec.embed").unwrap(), dst.get("dec.embed").unwrap());
    }

    #[test]
    fn adopt_prefix_rejects_shape_clash() {
        let cfg = ModelConfig::default();
        let mut other_cfg = cfg.clone();
        other_cfg.enc_dim = 32;
        let src: ParamStore<f64> = init_model_params(&other_cfg, 80, 30, 1);
        let mut dst: ParamStore<f64> = init_model_params(&cfg, 80, 30, 2);
        assert!(matches!(
            dst.adopt_prefix(&src, "enc."),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ssl_params_attach_and_strip() {
        let cfg = ModelConfig::default();
        let mut store: ParamStore<f64> = init_model_params(&cfg, 80, 30, 7);
        add_ssl_params(&mut store, &cfg, 80, 100, 7);
        assert_eq!(store.get("ssl_head.w").unwrap().shape(), (64, 100));
        assert_eq!(store.get("ssl_mask.embed").unwrap().shape(), (1, 80));
        store.remove_prefix("ssl_");
        assert!(!store.contains("ssl_head.w"));
    }
}
