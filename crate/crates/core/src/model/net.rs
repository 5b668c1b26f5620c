//! Forward-graph construction for the conformer encoder / transformer
//! decoder pair. Each utterance gets its own [`Tape`]; parameters are
//! registered lazily and can be located again by name after `backward`.

use super::config::ModelConfig;
use super::params::ParamStore;
use super::vocab::{BLANK, SOS_EOS};
use super::ModelError;
use crate::autograd::{ctc_min_frames, NodeId, Tape};
use crate::mat::Mat;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

const MASK_NEG: f64 = -1e30;

/// Sinusoidal position table for `len` steps of width `d` (`d` even).
pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize) -> Mat<T> {
    assert!(d % 2 == 0, "position encoding needs an even width");
    let mut pe = Mat::zeros(len, d);
    for t in 0..len {
        for i in 0..d / 2 {
            let rate = (t as f64) * (-(10_000f64.ln()) * (2 * i) as f64 / d as f64).exp();
            pe.set(t, 2 * i, T::of_f64(rate.sin()));
            pe.set(t, 2 * i + 1, T::of_f64(rate.cos()));
        }
    }
    pe
}

pub struct EncoderOut {
    /// `layer_ids[0]` is the frontend output (input to the first block);
    /// `layer_ids[l]` for `l >= 1` is the output of block `l`.
    pub layer_ids: Vec<NodeId>,
    pub final_id: NodeId,
}

/// Per-utterance graph builder. Train mode draws dropout masks from a
/// seeded generator; eval mode is deterministic and dropout-free.
pub struct Network<'c, T: Scalar> {
    cfg: &'c ModelConfig,
    pub tape: Tape<T>,
    ids: BTreeMap<String, NodeId>,
    dropout_rng: Option<ChaCha20Rng>,
}

impl<'c, T: Scalar> Network<'c, T> {
    pub fn new_eval(cfg: &'c ModelConfig) -> Self {
        Network {
            cfg,
            tape: Tape::new(),
            ids: BTreeMap::new(),
            dropout_rng: None,
        }
    }

    pub fn new_train(cfg: &'c ModelConfig, dropout_seed: u64) -> Self {
        Network {
            cfg,
            tape: Tape::new(),
            ids: BTreeMap::new(),
            dropout_rng: Some(ChaCha20Rng::seed_from_u64(dropout_seed)),
        }
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        self.tape.value(id)
    }

    /// Name → tape node for every parameter touched by this graph.
    pub fn param_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.ids
    }

    fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.tape.leaf(value, true);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    fn linear(
        &mut self,
        store: &ParamStore<T>,
        x: NodeId,
        prefix: &str,
    ) -> Result<NodeId, ModelError> {
        let w = self.param(store, &format!("{prefix}.w"))?;
        let b = self.param(store, &format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w);
        Ok(self.tape.add_row(y, b))
    }

    fn layer_norm(
        &mut self,
        store: &ParamStore<T>,
        x: NodeId,
        prefix: &str,
    ) -> Result<NodeId, ModelError> {
        let g = self.param(store, &format!("{prefix}.g"))?;
        let b = self.param(store, &format!("{prefix}.b"))?;
        Ok(self
            .tape
            .layer_norm_rows(x, g, b, T::of_f64(1e-6)))
    }

    fn dropout(&mut self, x: NodeId) -> NodeId {
        let p = self.cfg.dropout;
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let n = {
            let v = self.tape.value(x);
            v.rows() * v.cols()
        };
        let keep = T::of_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.tape.dropout(x, mask)
    }

    fn attention(
        &mut self,
        store: &ParamStore<T>,
        x: NodeId,
        prefix: &str,
        mask: Option<NodeId>,
        kv: Option<NodeId>,
    ) -> Result<NodeId, ModelError> {
        let d = self.cfg.enc_dim;
        let heads = self.cfg.enc_heads;
        let dh = d / heads;
        let q = self.linear(store, x, &format!("{prefix}.q"))?;
        let src = kv.unwrap_or(x);
        let k = self.linear(store, src, &format!("{prefix}.k"))?;
        let v = self.linear(store, src, &format!("{prefix}.v"))?;
        let scale = T::of_f64(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let kt = self.tape.transpose(kh);
            let mut scores = self.tape.matmul(qh, kt);
            scores = self.tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = self.tape.add(scores, m);
            }
            let mut att = self.tape.softmax_rows(scores);
            att = self.dropout(att);
            outs.push(self.tape.matmul(att, vh));
        }
        let cat = self.tape.concat_cols(&outs);
        let o = self.linear(store, cat, &format!("{prefix}.o"))?;
        Ok(self.dropout(o))
    }

    fn feed_forward(
        &mut self,
        store: &ParamStore<T>,
        x: NodeId,
        prefix: &str,
        silu: bool,
    ) -> Result<NodeId, ModelError> {
        let w1 = self.param(store, &format!("{prefix}.w1"))?;
        let b1 = self.param(store, &format!("{prefix}.b1"))?;
        let w2 = self.param(store, &format!("{prefix}.w2"))?;
        let b2 = self.param(store, &format!("{prefix}.b2"))?;
        let mut h = self.tape.matmul(x, w1);
        h = self.tape.add_row(h, b1);
        h = if silu { self.tape.silu(h) } else { self.tape.relu(h) };
        h = self.dropout(h);
        h = self.tape.matmul(h, w2);
        h = self.tape.add_row(h, b2);
        Ok(self.dropout(h))
    }

    fn conformer_block(
        &mut self,
        store: &ParamStore<T>,
        x: NodeId,
        layer: usize,
    ) -> Result<NodeId, ModelError> {
        let p = format!("enc.l{layer}");
        let half = T::of_f64(0.5);

        // macaron feed-forward, half-weighted
        let t = self.layer_norm(store, x, &format!("{p}.ffn1.ln"))?;
        let f = self.feed_forward(store, t, &format!("{p}.ffn1"), true)?;
        let f = self.tape.scale(f, half);
        let x = self.tape.add(x, f);

        // self-attention
        let t = self.layer_norm(store, x, &format!("{p}.attn.ln"))?;
        let a = self.attention(store, t, &format!("{p}.attn"), None, None)?;
        let x = self.tape.add(x, a);

        // convolution module: pointwise+GLU, depthwise, norm, SiLU, pointwise
        let t = self.layer_norm(store, x, &format!("{p}.conv.ln"))?;
        let pw = self.linear(store, t, &format!("{p}.conv.pw1"))?;
        let d = self.cfg.enc_dim;
        let gate_in = self.tape.slice_cols(pw, 0, d);
        let gate_ctl = self.tape.slice_cols(pw, d, d);
        let sig = self.tape.sigmoid(gate_ctl);
        let glu = self.tape.mul_elem(gate_in, sig);
        let dw = self.param(store, &format!("{p}.conv.dw.w"))?;
        let conv = self.tape.depthwise_conv1d(glu, dw);
        let conv = self.layer_norm(store, conv, &format!("{p}.conv.norm"))?;
        let conv = self.tape.silu(conv);
        let conv = self.linear(store, conv, &format!("{p}.conv.pw2"))?;
        let conv = self.dropout(conv);
        let x = self.tape.add(x, conv);

        // second half feed-forward
        let t = self.layer_norm(store, x, &format!("{p}.ffn2.ln"))?;
        let f = self.feed_forward(store, t, &format!("{p}.ffn2"), true)?;
        let f = self.tape.scale(f, half);
        let x = self.tape.add(x, f);

        self.layer_norm(store, x, &format!("{p}.out.ln"))
    }

    /// Run the encoder over a `T×n_mels` feature matrix. `mask_rows`
    /// replaces the listed input frames with the learned mask vector
    /// (used by the pretraining objective).
    pub fn encode(
        &mut self,
        store: &ParamStore<T>,
        feats: &Mat<T>,
        mask_rows: Option<&[usize]>,
    ) -> Result<EncoderOut, ModelError> {
        if feats.rows() == 0 {
            return Err(ModelError::InvalidInput("empty feature matrix".into()));
        }
        let expect_in = store.get("enc.sub1.w")?.rows();
        if 3 * feats.cols() != expect_in {
            return Err(ModelError::InvalidInput(format!(
                "feature dim {} does not match the model input dim {}",
                feats.cols(),
                expect_in / 3
            )));
        }

        let mut x = self.tape.constant(feats.clone());
        if let Some(rows) = mask_rows {
            let fill = self.param(store, "ssl_mask.embed")?;
            x = self.tape.mask_rows_with(x, fill, rows);
        }

        for stage in ["enc.sub1", "enc.sub2"] {
            let u = self.tape.unfold1d(x, 3, 2, 1);
            let w = self.param(store, &format!("{stage}.w"))?;
            let b = self.param(store, &format!("{stage}.b"))?;
            let y = self.tape.matmul(u, w);
            let y = self.tape.add_row(y, b);
            x = self.tape.relu(y);
        }

        let d = self.cfg.enc_dim;
        let t_sub = self.tape.value(x).rows();
        x = self.tape.scale(x, T::of_f64((d as f64).sqrt()));
        let pos = self.tape.constant(sinusoidal_positions(t_sub, d));
        x = self.tape.add(x, pos);
        x = self.dropout(x);

        let mut layer_ids = vec![x];
        for l in 0..self.cfg.enc_layers {
            x = self.conformer_block(store, x, l)?;
            layer_ids.push(x);
        }
        Ok(EncoderOut {
            layer_ids,
            final_id: x,
        })
    }

    /// Per-frame log-posteriors over the vocabulary for the CTC branch.
    pub fn ctc_log_probs(
        &mut self,
        store: &ParamStore<T>,
        enc: NodeId,
    ) -> Result<NodeId, ModelError> {
        let y = self.linear(store, enc, "ctc_head")?;
        Ok(self.tape.log_softmax_rows(y))
    }

    /// Per-frame log-posteriors over cluster ids for pretraining.
    pub fn ssl_log_probs(
        &mut self,
        store: &ParamStore<T>,
        enc: NodeId,
    ) -> Result<NodeId, ModelError> {
        let y = self.linear(store, enc, "ssl_head")?;
        Ok(self.tape.log_softmax_rows(y))
    }

    /// Teacher-forced decoder pass. `tokens` starts with the sequence
    /// marker; output row `i` holds log-probabilities for position `i+1`.
    pub fn decoder_log_probs(
        &mut self,
        store: &ParamStore<T>,
        enc: NodeId,
        tokens: &[usize],
    ) -> Result<NodeId, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::InvalidInput("empty decoder input".into()));
        }
        let embed = self.param(store, "dec.embed")?;
        let vocab = self.tape.value(embed).rows();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(ModelError::InvalidInput(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let d = self.cfg.enc_dim;
        let len = tokens.len();
        let mut x = self.tape.gather_rows(embed, tokens);
        x = self.tape.scale(x, T::of_f64((d as f64).sqrt()));
        let pos = self.tape.constant(sinusoidal_positions(len, d));
        x = self.tape.add(x, pos);
        x = self.dropout(x);

        let mut causal = Mat::zeros(len, len);
        for r in 0..len {
            for c in r + 1..len {
                causal.set(r, c, T::of_f64(MASK_NEG));
            }
        }
        let mask = self.tape.constant(causal);

        for l in 0..self.cfg.dec_layers {
            let p = format!("dec.l{l}");
            let t = self.layer_norm(store, x, &format!("{p}.self.ln"))?;
            let a = self.attention(store, t, &format!("{p}.self"), Some(mask), None)?;
            x = self.tape.add(x, a);
            let t = self.layer_norm(store, x, &format!("{p}.cross.ln"))?;
            let a = self.attention(store, t, &format!("{p}.cross"), None, Some(enc))?;
            x = self.tape.add(x, a);
            let t = self.layer_norm(store, x, &format!("{p}.ffn.ln"))?;
            let f = self.feed_forward(store, t, &format!("{p}.ffn"), false)?;
            x = self.tape.add(x, f);
        }
        x = self.layer_norm(store, x, "dec.final_ln")?;
        let y = self.linear(store, x, "dec.out")?;
        Ok(self.tape.log_softmax_rows(y))
    }
}

/// Unreduced loss nodes for one utterance: the CTC negative log-likelihood
/// and the summed decoder cross-entropy, plus the counts needed to pool
/// them across a batch.
pub struct SupervisedNodes {
    pub ctc_sum: NodeId,
    pub ce_sum: NodeId,
    pub encoder: EncoderOut,
    pub target_len: usize,
    pub dec_positions: usize,
}

pub fn supervised_loss_nodes<T: Scalar>(
    net: &mut Network<T>,
    store: &ParamStore<T>,
    feats: &Mat<T>,
    targets: &[usize],
) -> Result<SupervisedNodes, ModelError> {
    let encoder = net.encode(store, feats, None)?;
    let t_sub = net.value(encoder.final_id).rows();
    let need = ctc_min_frames(targets);
    if need > t_sub {
        return Err(ModelError::InfeasibleTarget {
            need,
            have: t_sub,
        });
    }
    let ctc_lp = net.ctc_log_probs(store, encoder.final_id)?;
    let ctc_sum = net.tape.ctc_loss(ctc_lp, targets, BLANK);

    let mut dec_in = Vec::with_capacity(targets.len() + 1);
    dec_in.push(SOS_EOS);
    dec_in.extend_from_slice(targets);
    let mut dec_tg = targets.to_vec();
    dec_tg.push(SOS_EOS);

    let dlp = net.decoder_log_probs(store, encoder.final_id, &dec_in)?;
    let smoothing = T::of_f64(net.cfg.label_smoothing);
    let ce_mean = net.tape.ce_loss(dlp, &dec_tg, smoothing, None);
    let ce_sum = net.tape.scale(ce_mean, T::of_usize(dec_tg.len()));

    Ok(SupervisedNodes {
        ctc_sum,
        ce_sum,
        encoder,
        target_len: targets.len(),
        dec_positions: dec_tg.len(),
    })
}

/// `lambda·ctc/ctc_norm + (1−lambda)·ce/ce_norm` as a scalar node. The
/// norms are the pooled token counts, so summing this over a batch yields
/// the batch joint loss.
pub fn joint_scalar<T: Scalar>(
    net: &mut Network<T>,
    nodes: &SupervisedNodes,
    lambda: f64,
    ctc_norm: usize,
    ce_norm: usize,
) -> NodeId {
    let ctc_part = net
        .tape
        .scale(nodes.ctc_sum, T::of_f64(lambda / ctc_norm.max(1) as f64));
    let ce_part = net.tape.scale(
        nodes.ce_sum,
        T::of_f64((1.0 - lambda) / ce_norm.max(1) as f64),
    );
    net.tape.add(ctc_part, ce_part)
}
