//! Gradient training: Adam with a warmup/decay schedule, deterministic
//! batch accumulation, augmentation, validation-based model selection,
//! and per-step JSONL logging.

use crate::autograd::{ctc_min_frames, NodeId};
use crate::features::{spec_augment, SpecAugmentPolicy};
use crate::mat::Mat;
use crate::model::{
    joint_scalar, save_checkpoint, supervised_loss_nodes, ModelConfig, ModelError, Network,
    ParamStore, Provenance, Vocabulary,
};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("every utterance in the training set was skipped")]
    AllSkipped,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            peak_lr: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl AdamConfig {
    /// Linear warmup to `peak_lr`, then inverse-square-root decay.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        self.peak_lr * (step / warm).min((warm / step).sqrt())
    }
}

/// Adam state over named parameters.
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Mat<T>>,
    v: BTreeMap<String, Mat<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update; returns the learning rate that was used.
    pub fn apply(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Mat<T>>,
    ) -> f64 {
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        let b1 = T::of_f64(self.cfg.beta1);
        let b2 = T::of_f64(self.cfg.beta2);
        let eps = T::of_f64(self.cfg.eps);
        let lr_t = T::of_f64(lr);
        let bc1 = T::of_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::of_f64(1.0 - self.cfg.beta2.powi(self.step as i32));

        for (name, grad) in grads {
            let Ok(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
            for i in 0..grad.data().len() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * g;
                let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        lr
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Maximum utterances accumulated into one optimizer step.
    pub batch_utts: usize,
    /// Cap on summed audio seconds per step (0 disables the cap).
    pub batch_seconds: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub spec_augment: SpecAugmentPolicy,
    /// Abort if the training loss exceeds this value or turns non-finite.
    pub divergence_loss: f64,
    /// Keep per-epoch checkpoint directories instead of pruning to best.
    pub keep_all_epochs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_utts: 8,
            batch_seconds: 60.0,
            adam: AdamConfig::default(),
            grad_clip: 5.0,
            spec_augment: SpecAugmentPolicy::default(),
            divergence_loss: 1e4,
            keep_all_epochs: false,
        }
    }
}

/// Input-frame span masking for the cluster-prediction objective.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SpanMaskConfig {
    /// Probability that each input frame starts a masked span.
    pub start_prob: f64,
    /// Length of each masked span in input frames.
    pub span_frames: usize,
    /// Compute the loss only on output frames covered by a mask.
    pub loss_on_masked_only: bool,
}

impl Default for SpanMaskConfig {
    fn default() -> Self {
        SpanMaskConfig {
            start_prob: 0.065,
            span_frames: 10,
            loss_on_masked_only: true,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Objective {
    /// Weighted CTC + attention cross-entropy.
    Joint { lambda: f64 },
    /// Frame-level cross-entropy against cluster ids, optionally with
    /// learned-embedding span masking of the input.
    FrameCe { mask: Option<SpanMaskConfig> },
}

/// One training utterance held in memory.
#[derive(Debug, Clone)]
pub struct TrainItem<T: Scalar> {
    pub utt_id: String,
    pub feats: Mat<T>,
    /// Character ids for the joint objective; per-output-frame cluster ids
    /// for the frame objective.
    pub targets: Vec<usize>,
    pub duration_s: f64,
    /// Expected presentations per epoch (fractional parts are sampled).
    pub weight: f64,
    /// Marks machine-transcribed utterances so their loss contribution is
    /// logged separately from gold data.
    pub pseudo: bool,
}

#[derive(Debug, Clone, Serialize)]
struct LogRecord {
    step: u64,
    epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    ctc: Option<f64>,
    ce: f64,
    joint: f64,
    lr: f64,
    /// Pooled loss over the gold items in the step, present only when the
    /// run mixes gold and pseudo-labeled data.
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pseudo: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_step: u64,
    pub diverged: bool,
    pub skipped_utterances: usize,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct TrainSession<'a, T: Scalar> {
    pub model_cfg: &'a ModelConfig,
    pub train_cfg: &'a TrainConfig,
    pub vocab: &'a Vocabulary,
    pub objective: Objective,
    pub train_items: &'a [TrainItem<T>],
    pub val_items: &'a [TrainItem<T>],
    /// Checkpoint/log directory; `None` trains purely in memory.
    pub out_dir: Option<&'a Path>,
    pub seed: u64,
    pub stage_name: &'a str,
    pub parent: Option<String>,
}

struct UttResult<T: Scalar> {
    grads: BTreeMap<String, Mat<T>>,
    ctc_sum: f64,
    ce_sum: f64,
    ctc_tokens: usize,
    ce_tokens: usize,
    skipped: bool,
}

impl<'a, T: Scalar> TrainSession<'a, T> {
    pub fn run(&self, mut params: ParamStore<T>) -> Result<(ParamStore<T>, TrainOutcome), TrainError> {
        if self.train_cfg.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be positive".into()));
        }
        if self.train_cfg.batch_utts == 0 {
            return Err(TrainError::BadConfig("batch_utts must be positive".into()));
        }
        if let Objective::Joint { lambda } = self.objective {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(TrainError::BadConfig(format!(
                    "loss weight {lambda} outside [0, 1]"
                )));
            }
        }

        let mut log_file = match self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(fs::File::create(dir.join("train_log.jsonl"))?)
            }
            None => None,
        };

        let mut adam: Adam<T> = Adam::new(self.train_cfg.adam.clone());
        let mut best: Option<(usize, f64, ParamStore<T>)> = None;
        let mut diverged = false;
        let mut skipped_total = 0usize;
        let mut epochs_run = 0usize;
        let mut epoch_dirs: Vec<(usize, PathBuf)> = Vec::new();

        'epochs: for epoch in 1..=self.train_cfg.epochs {
            let order = self.presentation_order(epoch);
            let batches = self.pack_batches(&order);
            let mut epoch_any_update = false;

            for (batch_no, batch) in batches.iter().enumerate() {
                let step = adam.step_count() + 1;
                let results: Vec<UttResult<T>> = batch
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &item_idx)| {
                        self.forward_backward(
                            &params,
                            &self.train_items[item_idx],
                            batch,
                            epoch,
                            step,
                            slot,
                        )
                    })
                    .collect();

                let mut grads: BTreeMap<String, Mat<T>> = BTreeMap::new();
                let (mut ctc_sum, mut ce_sum) = (0.0f64, 0.0f64);
                let (mut ctc_tokens, mut ce_tokens) = (0usize, 0usize);
                // Indexed by is-pseudo: [gold, pseudo] partial sums.
                let mut split_sums = [[0.0f64; 2]; 2];
                let mut split_tokens = [[0usize; 2]; 2];
                let mut used = 0usize;
                for (slot, r) in results.into_iter().enumerate() {
                    if r.skipped {
                        skipped_total += 1;
                        continue;
                    }
                    used += 1;
                    ctc_sum += r.ctc_sum;
                    ce_sum += r.ce_sum;
                    ctc_tokens += r.ctc_tokens;
                    ce_tokens += r.ce_tokens;
                    let src = usize::from(self.train_items[batch[slot]].pseudo);
                    split_sums[src][0] += r.ctc_sum;
                    split_sums[src][1] += r.ce_sum;
                    split_tokens[src][0] += r.ctc_tokens;
                    split_tokens[src][1] += r.ce_tokens;
                    for (name, g) in r.grads {
                        grads
                            .entry(name)
                            .and_modify(|acc| acc.add_assign(&g))
                            .or_insert(g);
                    }
                }
                if used == 0 {
                    continue;
                }

                let (ctc_loss, ce_loss, joint) = self.pooled_losses(
                    ctc_sum, ce_sum, ctc_tokens, ce_tokens,
                );
                if !joint.is_finite() || joint > self.train_cfg.divergence_loss {
                    log::error!(
                        "training diverged at epoch {epoch} batch {batch_no}: loss {joint}"
                    );
                    diverged = true;
                    break 'epochs;
                }

                let finite = grads.values().all(Mat::is_finite);
                if !finite {
                    log::warn!("skipping update with non-finite gradients at step {step}");
                    continue;
                }
                clip_global_norm(&mut grads, self.train_cfg.grad_clip);
                let lr = adam.apply(&mut params, &grads);
                epoch_any_update = true;

                if let Some(f) = log_file.as_mut() {
                    let mixed = self.train_items.iter().any(|i| i.pseudo);
                    let split_joint = |src: usize| {
                        (split_tokens[src][0] + split_tokens[src][1] > 0).then(|| {
                            self.pooled_losses(
                                split_sums[src][0],
                                split_sums[src][1],
                                split_tokens[src][0],
                                split_tokens[src][1],
                            )
                            .2
                        })
                    };
                    let rec = LogRecord {
                        step: adam.step_count(),
                        epoch,
                        ctc: ctc_loss,
                        ce: ce_loss,
                        joint,
                        lr,
                        gold: if mixed { split_joint(0) } else { None },
                        pseudo: if mixed { split_joint(1) } else { None },
                    };
                    writeln!(f, "{}", serde_json::to_string(&rec).expect("log record"))?;
                }
            }

            if !epoch_any_update {
                return Err(TrainError::AllSkipped);
            }
            epochs_run = epoch;

            let val_loss = self.validation_loss(&params)?;
            log::info!(
                "epoch {epoch}: validation loss {val_loss:.4} ({} train utts)",
                self.train_items.len()
            );
            let improved = best.as_ref().map_or(true, |(_, b, _)| val_loss < *b);
            if improved {
                best = Some((epoch, val_loss, params.clone()));
            }

            if let Some(dir) = self.out_dir {
                let edir = dir.join("epochs").join(format!("epoch_{epoch:03}"));
                save_checkpoint(
                    &edir,
                    self.model_cfg,
                    self.vocab,
                    &params,
                    &Provenance {
                        stage: self.stage_name.to_string(),
                        parent: self.parent.clone(),
                        seed: self.seed,
                        epoch: Some(epoch as u64),
                        step: Some(adam.step_count()),
                        note: None,
                        params_sha256: String::new(),
                    },
                )?;
                epoch_dirs.push((epoch, edir));
            }
        }

        let (best_epoch, best_val_loss, best_params) = match best {
            Some(b) => b,
            None => {
                return Err(TrainError::AllSkipped);
            }
        };

        let mut best_path = None;
        if let Some(dir) = self.out_dir {
            let bdir = dir.join("best");
            save_checkpoint(
                &bdir,
                self.model_cfg,
                self.vocab,
                &best_params,
                &Provenance {
                    stage: self.stage_name.to_string(),
                    parent: self.parent.clone(),
                    seed: self.seed,
                    epoch: Some(best_epoch as u64),
                    step: Some(adam.step_count()),
                    note: Some(format!("validation loss {best_val_loss}")),
                    params_sha256: String::new(),
                },
            )?;
            if !self.train_cfg.keep_all_epochs {
                for (epoch, edir) in &epoch_dirs {
                    if *epoch != best_epoch {
                        let _ = fs::remove_dir_all(edir);
                    }
                }
            }
            best_path = Some(bdir);
        }

        Ok((
            best_params,
            TrainOutcome {
                epochs_run,
                best_epoch,
                best_val_loss,
                final_step: adam.step_count(),
                diverged,
                skipped_utterances: skipped_total,
                best_checkpoint: best_path,
            },
        ))
    }

    /// Expand weights into presentation counts and shuffle, seeded by
    /// `(seed, epoch)` only, so worker count cannot affect the order.
    fn presentation_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha20Rng::seed_from_u64(
            self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut order = Vec::new();
        for (i, item) in self.train_items.iter().enumerate() {
            let copies = item.weight.max(0.0);
            let whole = copies.floor() as usize;
            let frac = copies - copies.floor();
            let n = whole + usize::from(rng.gen::<f64>() < frac);
            for _ in 0..n {
                order.push(i);
            }
        }
        order.shuffle(&mut rng);
        order
    }

    fn pack_batches(&self, order: &[usize]) -> Vec<Vec<usize>> {
        let mut batches = Vec::new();
        let mut cur: Vec<usize> = Vec::new();
        let mut cur_sec = 0.0f64;
        for &idx in order {
            let dur = self.train_items[idx].duration_s;
            let full = cur.len() >= self.train_cfg.batch_utts
                || (self.train_cfg.batch_seconds > 0.0
                    && !cur.is_empty()
                    && cur_sec + dur > self.train_cfg.batch_seconds);
            if full {
                batches.push(std::mem::take(&mut cur));
                cur_sec = 0.0;
            }
            cur.push(idx);
            cur_sec += dur;
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
        batches
    }

    fn utt_seed(&self, epoch: usize, step: u64, slot: usize) -> u64 {
        self.seed
            .wrapping_mul(0x100_0000_01B3)
            .wrapping_add(epoch as u64)
            .wrapping_mul(0x100_0000_01B3)
            .wrapping_add(step)
            .wrapping_mul(0x100_0000_01B3)
            .wrapping_add(slot as u64)
    }

    fn forward_backward(
        &self,
        params: &ParamStore<T>,
        item: &TrainItem<T>,
        batch: &[usize],
        epoch: usize,
        step: u64,
        slot: usize,
    ) -> UttResult<T> {
        let skipped = UttResult {
            grads: BTreeMap::new(),
            ctc_sum: 0.0,
            ce_sum: 0.0,
            ctc_tokens: 0,
            ce_tokens: 0,
            skipped: true,
        };
        let seed = self.utt_seed(epoch, step, slot);
        let feats = if self.train_cfg.spec_augment.is_noop() {
            item.feats.clone()
        } else {
            let fm = crate::features::FeatureMatrix {
                utt_id: item.utt_id.clone(),
                frames: item.feats.clone(),
                frame_shift_s: 0.01,
                frame_length_s: 0.025,
            };
            spec_augment(&fm, &self.train_cfg.spec_augment, seed ^ 0xA5A5).frames
        };

        // pooled token counts over the whole batch for this objective
        let (ctc_norm, ce_norm) = self.batch_norms(batch);

        let mut net = Network::new_train(self.model_cfg, seed);
        let built: Result<(NodeId, f64, f64, usize, usize), ModelError> = match &self.objective {
            Objective::Joint { lambda } => {
                match supervised_loss_nodes(&mut net, params, &feats, &item.targets) {
                    Ok(nodes) => {
                        let j = joint_scalar(&mut net, &nodes, *lambda, ctc_norm, ce_norm);
                        let ctc = net.tape.scalar_value(nodes.ctc_sum).to_f64_lossy();
                        let ce = net.tape.scalar_value(nodes.ce_sum).to_f64_lossy();
                        Ok((j, ctc, ce, nodes.target_len, nodes.dec_positions))
                    }
                    Err(e) => Err(e),
                }
            }
            Objective::FrameCe { mask } => {
                self.frame_ce_nodes(&mut net, params, &feats, item, mask.as_ref(), seed, ce_norm)
            }
        };

        let (root, ctc_sum, ce_sum, ctc_tokens, ce_tokens) = match built {
            Ok(v) => v,
            Err(ModelError::InfeasibleTarget { need, have }) => {
                log::warn!(
                    "skipping {}: target needs {need} frames, encoder provides {have}",
                    item.utt_id
                );
                return skipped;
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", item.utt_id);
                return skipped;
            }
        };
        if !ctc_sum.is_finite() {
            log::warn!("skipping {}: non-finite alignment loss", item.utt_id);
            return skipped;
        }

        let grads = net.tape.backward(root);
        let mut named: BTreeMap<String, Mat<T>> = BTreeMap::new();
        for (name, &id) in net.param_ids() {
            if let Some(g) = grads.get(id) {
                named.insert(name.clone(), g.clone());
            }
        }
        UttResult {
            grads: named,
            ctc_sum,
            ce_sum,
            ctc_tokens,
            ce_tokens,
            skipped: false,
        }
    }

    /// Build the frame-classification loss for one utterance; returns the
    /// same tuple layout as the joint branch with ctc fields zeroed.
    #[allow(clippy::too_many_arguments)]
    fn frame_ce_nodes(
        &self,
        net: &mut Network<T>,
        params: &ParamStore<T>,
        feats: &Mat<T>,
        item: &TrainItem<T>,
        mask: Option<&SpanMaskConfig>,
        seed: u64,
        ce_norm: usize,
    ) -> Result<(NodeId, f64, f64, usize, usize), ModelError> {
        let t_out = self.model_cfg.subsampled_len(feats.rows());
        // Off-by-one between cluster targets and encoder frames happens at
        // utterance edges; truncate to the shorter side, reject anything worse.
        let usable = crate::ssl::reconcile_target_len(&item.utt_id, item.targets.len(), t_out)
            .map_err(|e| ModelError::InvalidInput(e.to_string()))?;

        let (mask_rows, loss_rows) = match mask {
            None => (None, None),
            Some(m) => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xC3C3);
                let mut masked = vec![false; feats.rows()];
                for t in 0..feats.rows() {
                    if rng.gen::<f64>() < m.start_prob {
                        for row in masked.iter_mut().skip(t).take(m.span_frames) {
                            *row = true;
                        }
                    }
                }
                let rows: Vec<usize> = masked
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &m)| m.then_some(i))
                    .collect();
                let loss_rows = if m.loss_on_masked_only && !rows.is_empty() {
                    let mut out_rows: Vec<usize> = rows
                        .iter()
                        .map(|&r| (r / 4).min(usable - 1))
                        .collect();
                    out_rows.dedup();
                    Some(out_rows)
                } else {
                    None
                };
                (Some(rows), loss_rows)
            }
        };

        let enc = net.encode(
            params,
            feats,
            mask_rows.as_deref().filter(|r| !r.is_empty()),
        )?;
        let lp = net.ssl_log_probs(params, enc.final_id)?;
        let (targets, rows): (Vec<usize>, Option<Vec<usize>>) = match loss_rows {
            Some(rows) => (
                rows.iter().map(|&r| item.targets[r]).collect(),
                Some(rows),
            ),
            None if usable == t_out => (item.targets[..usable].to_vec(), None),
            None => (item.targets[..usable].to_vec(), Some((0..usable).collect())),
        };
        let n_rows = targets.len();
        let ce_mean = net.tape.ce_loss(lp, &targets, T::zero(), rows);
        let ce_sum = net.tape.scale(ce_mean, T::of_usize(n_rows));
        let root = net
            .tape
            .scale(ce_sum, T::of_f64(1.0 / ce_norm.max(1) as f64));
        let ce_val = net.tape.scalar_value(ce_sum).to_f64_lossy();
        Ok((root, 0.0, ce_val, 0, n_rows))
    }

    /// Total normalizer tokens for a batch: (ctc tokens, ce tokens).
    fn batch_norms(&self, batch: &[usize]) -> (usize, usize) {
        match &self.objective {
            Objective::Joint { .. } => {
                let ctc: usize = batch
                    .iter()
                    .map(|&i| self.train_items[i].targets.len())
                    .sum();
                let ce: usize = batch
                    .iter()
                    .map(|&i| self.train_items[i].targets.len() + 1)
                    .sum();
                (ctc, ce)
            }
            Objective::FrameCe { .. } => {
                let ce: usize = batch
                    .iter()
                    .map(|&i| {
                        let item = &self.train_items[i];
                        item.targets
                            .len()
                            .min(self.model_cfg.subsampled_len(item.feats.rows()))
                    })
                    .sum();
                (0, ce)
            }
        }
    }

    fn pooled_losses(
        &self,
        ctc_sum: f64,
        ce_sum: f64,
        ctc_tokens: usize,
        ce_tokens: usize,
    ) -> (Option<f64>, f64, f64) {
        match &self.objective {
            Objective::Joint { lambda } => {
                let ctc = ctc_sum / ctc_tokens.max(1) as f64;
                let ce = ce_sum / ce_tokens.max(1) as f64;
                (Some(ctc), ce, lambda * ctc + (1.0 - lambda) * ce)
            }
            Objective::FrameCe { .. } => {
                let ce = ce_sum / ce_tokens.max(1) as f64;
                (None, ce, ce)
            }
        }
    }

    /// Deterministic pooled loss over the validation set (eval mode, no
    /// augmentation). Falls back to the training set when empty.
    pub fn validation_loss(&self, params: &ParamStore<T>) -> Result<f64, TrainError> {
        let items = if self.val_items.is_empty() {
            self.train_items
        } else {
            self.val_items
        };
        let results: Vec<(f64, f64, usize, usize, bool)> = items
            .par_iter()
            .map(|item| {
                let mut net = Network::new_eval(self.model_cfg);
                match &self.objective {
                    Objective::Joint { .. } => {
                        match supervised_loss_nodes(&mut net, params, &item.feats, &item.targets) {
                            Ok(nodes) => {
                                let ctc = net.tape.scalar_value(nodes.ctc_sum).to_f64_lossy();
                                let ce = net.tape.scalar_value(nodes.ce_sum).to_f64_lossy();
                                (ctc, ce, nodes.target_len, nodes.dec_positions, false)
                            }
                            Err(_) => (0.0, 0.0, 0, 0, true),
                        }
                    }
                    Objective::FrameCe { .. } => {
                        let t_out = self.model_cfg.subsampled_len(item.feats.rows());
                        let usable = match crate::ssl::reconcile_target_len(
                            &item.utt_id,
                            item.targets.len(),
                            t_out,
                        ) {
                            Ok(n) => n,
                            Err(_) => return (0.0, 0.0, 0, 0, true),
                        };
                        let built = net.encode(params, &item.feats, None).and_then(|enc| {
                            net.ssl_log_probs(params, enc.final_id)
                        });
                        match built {
                            Ok(lp) => {
                                let rows: Option<Vec<usize>> = (usable < t_out)
                                    .then(|| (0..usable).collect());
                                let ce_mean = net.tape.ce_loss(
                                    lp,
                                    &item.targets[..usable],
                                    T::zero(),
                                    rows,
                                );
                                let ce = net.tape.scalar_value(ce_mean).to_f64_lossy()
                                    * usable as f64;
                                (0.0, ce, 0, usable, false)
                            }
                            Err(_) => (0.0, 0.0, 0, 0, true),
                        }
                    }
                }
            })
            .collect();

        let mut ctc_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut ctc_tokens = 0usize;
        let mut ce_tokens = 0usize;
        let mut usable = 0usize;
        for (ctc, ce, nc, nd, skip) in results {
            if skip || !ctc.is_finite() {
                continue;
            }
            usable += 1;
            ctc_sum += ctc;
            ce_sum += ce;
            ctc_tokens += nc;
            ce_tokens += nd;
        }
        if usable == 0 {
            return Err(TrainError::AllSkipped);
        }
        let (_, _, joint) = self.pooled_losses(ctc_sum, ce_sum, ctc_tokens, ce_tokens);
        Ok(joint)
    }
}

fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Mat<T>>, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let norm_sq: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum();
    let norm = norm_sq.sqrt();
    if norm > clip {
        let scale = T::of_f64(clip / norm);
        for g in grads.values_mut() {
            g.scale_assign(scale);
        }
    }
}

/// Check that an utterance's text can ever be aligned by the CTC branch
/// given the encoder frame rate.
pub fn ctc_feasible(cfg: &ModelConfig, num_frames: usize, targets: &[usize]) -> bool {
    ctc_min_frames(targets) <= cfg.subsampled_len(num_frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model_params;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = AdamConfig {
            peak_lr: 1.0,
            warmup_steps: 100,
            ..AdamConfig::default()
        };
        assert!((cfg.lr_at(1) - 0.01).abs() < 1e-12);
        assert!((cfg.lr_at(50) - 0.5).abs() < 1e-12);
        assert!((cfg.lr_at(100) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(400) - 0.5).abs() < 1e-12);
        let mut prev = 0.0;
        for s in 1..=100 {
            let lr = cfg.lr_at(s);
            assert!(lr >= prev);
            prev = lr;
        }
        for s in 101..300 {
            assert!(cfg.lr_at(s + 1) < cfg.lr_at(s));
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params: ParamStore<f64> = ParamStore::new();
        params.insert("w", Mat::from_vec(1, 3, vec![5.0, -3.0, 2.0]));
        let mut adam = Adam::new(AdamConfig {
            peak_lr: 0.5,
            warmup_steps: 1,
            ..AdamConfig::default()
        });
        for _ in 0..300 {
            let w = params.get("w").unwrap().clone();
            let grad = w.map(|x| 2.0 * x);
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), grad);
            adam.apply(&mut params, &grads);
        }
        let w = params.get("w").unwrap();
        assert!(w.data().iter().all(|&v| v.abs() < 1e-2), "{:?}", w.data());
    }

    #[test]
    fn clip_rescales_to_requested_norm() {
        let mut grads: BTreeMap<String, Mat<f64>> = BTreeMap::new();
        grads.insert("a".into(), Mat::from_vec(1, 2, vec![3.0, 0.0]));
        grads.insert("b".into(), Mat::from_vec(1, 1, vec![4.0]));
        clip_global_norm(&mut grads, 1.0);
        let norm: f64 = grads
            .values()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // under the clip: untouched
        let mut grads2: BTreeMap<String, Mat<f64>> = BTreeMap::new();
        grads2.insert("a".into(), Mat::from_vec(1, 1, vec![0.1]));
        clip_global_norm(&mut grads2, 1.0);
        assert_eq!(grads2.get("a").unwrap().data(), &[0.1]);
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            enc_heads: 2,
            enc_dim: 8,
            enc_ffn: 16,
            dec_layers: 1,
            conv_kernel: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn items(n: usize, t: usize, vocab: usize, seed: u64) -> Vec<TrainItem<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let data: Vec<f64> = (0..t * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let targets: Vec<usize> =
                    (0..3).map(|_| rng.gen_range(3..vocab)).collect();
                TrainItem {
                    utt_id: format!("utt{i:03}"),
                    feats: Mat::from_vec(t, 5, data),
                    targets,
                    duration_s: t as f64 * 0.01,
                    weight: 1.0,
                    pseudo: false,
                }
            })
            .collect()
    }

    fn session_defaults() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_utts: 4,
            batch_seconds: 0.0,
            adam: AdamConfig {
                peak_lr: 1e-3,
                warmup_steps: 5,
                ..AdamConfig::default()
            },
            spec_augment: SpecAugmentPolicy::none(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn joint_training_runs_and_is_deterministic() {
        let model_cfg = tiny_model();
        let vocab = Vocabulary::build(["abcdefgh"]);
        let train = items(6, 24, vocab.size(), 1);
        let run = || {
            let params = init_model_params::<f64>(&model_cfg, 5, vocab.size(), 3);
            let cfg = session_defaults();
            let sess = TrainSession {
                model_cfg: &model_cfg,
                train_cfg: &cfg,
                vocab: &vocab,
                objective: Objective::Joint { lambda: 0.3 },
                train_items: &train,
                val_items: &[],
                out_dir: None,
                seed: 11,
                stage_name: "test",
                parent: None,
            };
            sess.run(params).unwrap()
        };
        let (p1, o1) = run();
        let (p2, o2) = run();
        assert_eq!(p1, p2);
        assert_eq!(o1.final_step, o2.final_step);
        assert!(o1.final_step >= 2);
        assert!(!o1.diverged);
    }

    #[test]
    fn training_reduces_loss_on_learnable_data() {
        // every utterance is the same (features, target) pair, so a few
        // dozen updates must drive the loss down sharply
        let model_cfg = tiny_model();
        let vocab = Vocabulary::build(["abcdefgh"]);
        let base = items(1, 24, vocab.size(), 2).remove(0);
        let train: Vec<TrainItem<f64>> = (0..4)
            .map(|i| {
                let mut it = base.clone();
                it.utt_id = format!("copy{i}");
                it
            })
            .collect();
        let params = init_model_params::<f64>(&model_cfg, 5, vocab.size(), 3);
        let mut cfg = session_defaults();
        cfg.epochs = 30;
        cfg.batch_utts = 2;
        cfg.adam.peak_lr = 3e-3;
        cfg.adam.warmup_steps = 10;
        let sess = TrainSession {
            model_cfg: &model_cfg,
            train_cfg: &cfg,
            vocab: &vocab,
            objective: Objective::Joint { lambda: 0.3 },
            train_items: &train,
            val_items: &[],
            out_dir: None,
            seed: 5,
            stage_name: "test",
            parent: None,
        };
        let initial = sess.validation_loss(&params).unwrap();
        let (best, outcome) = sess.run(params).unwrap();
        let final_loss = sess.validation_loss(&best).unwrap();
        assert!(
            final_loss < initial * 0.7,
            "initial {initial}, final {final_loss}, outcome {outcome:?}"
        );
    }

    #[test]
    fn frame_objective_trains_and_masks() {
        let model_cfg = tiny_model();
        let vocab = Vocabulary::build(["ab"]);
        let mut store = init_model_params::<f64>(&model_cfg, 5, vocab.size(), 3);
        crate::model::add_ssl_params(&mut store, &model_cfg, 5, 4, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let train: Vec<TrainItem<f64>> = (0..4)
            .map(|i| {
                let t = 24;
                let data: Vec<f64> = (0..t * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let t_out = model_cfg.subsampled_len(t);
                TrainItem {
                    utt_id: format!("s{i}"),
                    feats: Mat::from_vec(t, 5, data),
                    targets: vec![1; t_out],
                    duration_s: 0.24,
                    weight: 1.0,
                    pseudo: false,
                }
            })
            .collect();
        let mut cfg = session_defaults();
        cfg.epochs = 15;
        cfg.batch_utts = 2;
        cfg.adam.peak_lr = 5e-3;
        cfg.adam.warmup_steps = 5;
        for mask in [None, Some(SpanMaskConfig::default())] {
            let sess = TrainSession {
                model_cfg: &model_cfg,
                train_cfg: &cfg,
                vocab: &vocab,
                objective: Objective::FrameCe { mask: mask.clone() },
                train_items: &train,
                val_items: &[],
                out_dir: None,
                seed: 7,
                stage_name: "pretrain",
                parent: None,
            };
            let initial = sess.validation_loss(&store).unwrap();
            assert!((initial - 4.0f64.ln()).abs() < 1e-6, "uniform start");
            let (best, _) = sess.run(store.clone()).unwrap();
            let final_loss = sess.validation_loss(&best).unwrap();
            assert!(
                final_loss < initial * 0.5,
                "mask={:?}: {initial} -> {final_loss}",
                mask.is_some()
            );
            // decoder parameters never receive gradients from this objective
            assert_eq!(
                best.get("dec.embed").unwrap(),
                store.get("dec.embed").unwrap()
            );
        }
    }

    #[test]
    fn batches_respect_caps() {
        let model_cfg = tiny_model();
        let vocab = Vocabulary::build(["ab"]);
        let train = items(10, 24, vocab.size(), 3);
        let mut cfg = session_defaults();
        cfg.batch_utts = 3;
        cfg.batch_seconds = 0.0;
        let sess = TrainSession {
            model_cfg: &model_cfg,
            train_cfg: &cfg,
            vocab: &vocab,
            objective: Objective::Joint { lambda: 0.3 },
            train_items: &train,
            val_items: &[],
            out_dir: None,
            seed: 1,
            stage_name: "test",
            parent: None,
        };
        let order: Vec<usize> = (0..10).collect();
        let batches = sess.pack_batches(&order);
        assert_eq!(batches.len(), 4);
        assert!(batches.iter().all(|b| b.len() <= 3));

        // seconds cap: each utt is 0.24s, cap allows two
        let mut cfg2 = session_defaults();
        cfg2.batch_utts = 100;
        cfg2.batch_seconds = 0.5;
        let sess2 = TrainSession {
            train_cfg: &cfg2,
            ..sess
        };
        let batches = sess2.pack_batches(&order);
        assert!(batches.iter().all(|b| b.len() <= 2));
    }

    #[test]
    fn infeasible_utterances_are_skipped_not_fatal() {
        let model_cfg = tiny_model();
        let vocab = Vocabulary::build(["abcdefgh"]);
        let mut train = items(4, 24, vocab.size(), 1);
        // 4 frames -> 1 encoder frame; 3 targets cannot align
        train[0].feats = Mat::zeros(4, 5);
        train[0].duration_s = 0.04;
        let params = init_model_params::<f64>(&model_cfg, 5, vocab.size(), 3);
        let cfg = session_defaults();
        let sess = TrainSession {
            model_cfg: &model_cfg,
            train_cfg: &cfg,
            vocab: &vocab,
            objective: Objective::Joint { lambda: 0.3 },
            train_items: &train,
            val_items: &[],
            out_dir: None,
            seed: 2,
            stage_name: "test",
            parent: None,
        };
        let (_, outcome) = sess.run(params).unwrap();
        assert!(outcome.skipped_utterances >= 2, "{outcome:?}");
    }

    #[test]
    fn checkpoints_prune_to_best() {
        let model_cfg = tiny_model();
        let vocab = Vocabulary::build(["abcdefgh"]);
        let train = items(4, 24, vocab.size(), 1);
        let params = init_model_params::<f64>(&model_cfg, 5, vocab.size(), 3);
        let mut cfg = session_defaults();
        cfg.epochs = 3;
        let dir = tempfile::tempdir().unwrap();
        let sess = TrainSession {
            model_cfg: &model_cfg,
            train_cfg: &cfg,
            vocab: &vocab,
            objective: Objective::Joint { lambda: 0.3 },
            train_items: &train,
            val_items: &train,
            out_dir: Some(dir.path()),
            seed: 2,
            stage_name: "baseline_supervised",
            parent: None,
        };
        let (_, outcome) = sess.run(params).unwrap();
        let best = dir.path().join("best");
        assert!(best.is_dir());
        let kept: Vec<_> = fs::read_dir(dir.path().join("epochs"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0], format!("epoch_{:03}", outcome.best_epoch));
        // the training log exists and parses
        let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let mut steps = 0;
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("step").is_some());
            assert!(v.get("joint").is_some());
            assert!(v.get("lr").is_some());
            steps += 1;
        }
        assert_eq!(steps as u64, outcome.final_step);
    }
}
