//! Stage implementations and the per-stage configuration payloads that feed
//! the completion-marker hashes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::audio::read_wav;
use crate::corpus::{mix_manifests, Manifest, Role, SubsetSpec};
use crate::decode::{read_hypotheses_tsv, transcribe_manifest, DecodeMode, TranscribeSetup};
use crate::eval::{character_error_rate, compare_conditions, word_error_rate, ConditionMeta, ScoreReport};
use crate::features::{
    apply_cmvn, compute_fbank, estimate_cmvn, ArchiveReader, ArchiveWriter, CmvnStats,
    FeatureMatrix,
};
use crate::lm::{char_symbols, lexicon_from_texts, train_ngram, word_symbols, Lexicon, NgramLm, Smoothing};
use crate::model::{
    add_ssl_params, init_model_params, load_checkpoint, save_checkpoint, Checkpoint, Provenance,
    Vocabulary,
};
use crate::ssl::{
    encoder_layer_output, fit_cluster_model, pool_fitting_sample, save_cluster_model,
    ClusterTargets,
};
use crate::sst::{filter_pseudolabels, merge_for_sst, pseudotranscribe, PseudoLabelSet, Transcriber};
use crate::train::{Objective, TrainItem, TrainOutcome, TrainSession};
use crate::Real;

use super::{stage_hash, PipelineError, Stage, StageCtx, TranscriberKind};

const READ_MANIFEST: &str = "read.jsonl";
const CS_MANIFEST: &str = "transcribed_cs.jsonl";
const UNTRANSCRIBED_MANIFEST: &str = "untranscribed_cs.jsonl";
const TEST_MANIFEST: &str = "test.jsonl";
const CMVN_FILE: &str = "cmvn.json";
const SUBSET_SALT: u64 = 0x5EED_5B5E_7000_0001;

// ---------------------------------------------------------------------------
// corpus access

fn corpus_file(ctx: &StageCtx<'_>, name: &str) -> Result<PathBuf, PipelineError> {
    let path = ctx.corpus_dir().join(name);
    if !path.exists() {
        return Err(PipelineError::Config(format!(
            "corpus file not found: {}",
            path.display()
        )));
    }
    Ok(path)
}

fn load_manifest(ctx: &StageCtx<'_>, name: &str, role: Role) -> Result<Manifest, PipelineError> {
    let path = corpus_file(ctx, name)?;
    Manifest::load(&path, role, &ctx.cfg.shared.normalizer)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// The transcribed conversational subset selected by the supervision knobs.
fn cs_gold_subset(ctx: &StageCtx<'_>) -> Result<Manifest, PipelineError> {
    let full = load_manifest(ctx, CS_MANIFEST, Role::TranscribedCs)?;
    let s = &ctx.cfg.shared;
    if s.supervised_utts >= 0 {
        let want = s.supervised_utts as usize;
        let mut idx: Vec<usize> = (0..full.utterances.len()).collect();
        idx.shuffle(&mut ChaCha20Rng::seed_from_u64(s.seed ^ SUBSET_SALT));
        idx.truncate(want);
        idx.sort_unstable();
        let mut subset = Manifest::new(full.role);
        for i in idx {
            subset.utterances.push(full.utterances[i].clone());
        }
        Ok(subset)
    } else if s.supervised_hours >= 0.0 {
        full.select_subset(&SubsetSpec {
            target_duration_s: s.supervised_hours * 3600.0,
            strategy: s.subset_strategy,
            seed: s.seed ^ SUBSET_SALT,
        })
        .map_err(|e| PipelineError::Config(e.to_string()))
    } else {
        Ok(full)
    }
}

/// Weighted manifests that carry gold transcripts, per the shared weights.
fn gold_parts(ctx: &StageCtx<'_>) -> Result<Vec<(Manifest, f64)>, PipelineError> {
    let s = &ctx.cfg.shared;
    let mut parts = Vec::new();
    if s.read_weight > 0.0 {
        let read = load_manifest(ctx, READ_MANIFEST, Role::Read)?;
        if !read.utterances.is_empty() {
            parts.push((read, s.read_weight));
        }
    }
    if s.cs_weight > 0.0 {
        let cs = cs_gold_subset(ctx)?;
        if !cs.utterances.is_empty() {
            parts.push((cs, s.cs_weight));
        }
    }
    Ok(parts)
}

fn gold_texts(parts: &[(Manifest, f64)]) -> Vec<String> {
    let mut texts = Vec::new();
    for (manifest, _) in parts {
        for utt in &manifest.utterances {
            if let Some(t) = &utt.text {
                texts.push(t.clone());
            }
        }
    }
    texts
}

/// All audio available for feature dumping and pretraining: read speech,
/// the full transcribed conversational set (audio only), and the
/// untranscribed conversational pool.
fn audio_pool(ctx: &StageCtx<'_>, stage: Stage) -> Result<Manifest, PipelineError> {
    let read = load_manifest(ctx, READ_MANIFEST, Role::Read)?;
    let cs = load_manifest(ctx, CS_MANIFEST, Role::TranscribedCs)?;
    let un = load_manifest(ctx, UNTRANSCRIBED_MANIFEST, Role::UntranscribedCs)?;
    let mut pool = Manifest::new(Role::Mixed);
    let mut seen = BTreeSet::new();
    for manifest in [read, cs, un] {
        for utt in manifest.utterances {
            if !seen.insert(utt.utt_id.clone()) {
                return Err(PipelineError::stage(
                    stage,
                    format!("utterance id '{}' appears in more than one corpus file", utt.utt_id),
                ));
            }
            pool.utterances.push(utt);
        }
    }
    if pool.utterances.is_empty() {
        return Err(PipelineError::stage(stage, "audio pool is empty"));
    }
    Ok(pool)
}

/// Deterministic utterance-level holdout split; the validation share is
/// `frac` rounded to at least one utterance (when more than one exists).
fn split_holdout(manifest: &Manifest, frac: f64, seed: u64) -> (Manifest, Manifest) {
    let n = manifest.utterances.len();
    let n_val = if frac <= 0.0 || n < 2 {
        0
    } else {
        (((n as f64) * frac).round() as usize).clamp(1, n - 1)
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut val_idx: Vec<usize> = idx[..n_val].to_vec();
    let mut train_idx: Vec<usize> = idx[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |ids: &[usize]| {
        let mut m = Manifest::new(manifest.role);
        for &i in ids {
            m.utterances.push(manifest.utterances[i].clone());
        }
        m
    };
    (pick(&train_idx), pick(&val_idx))
}

// ---------------------------------------------------------------------------
// feature and item preparation

fn utt_feats(
    ctx: &StageCtx<'_>,
    utt_id: &str,
    audio: &str,
) -> Result<FeatureMatrix<Real>, String> {
    let path = ctx.corpus_dir().join(audio);
    let wave = read_wav(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    compute_fbank(utt_id, &wave.samples, wave.sample_rate, &ctx.cfg.shared.fbank)
        .map_err(|e| format!("{utt_id}: {e}"))
}

/// Filterbank features for every utterance, in manifest order.
fn raw_feats(
    ctx: &StageCtx<'_>,
    stage: Stage,
    manifest: &Manifest,
) -> Result<Vec<FeatureMatrix<Real>>, PipelineError> {
    manifest
        .utterances
        .par_iter()
        .map(|u| utt_feats(ctx, &u.utt_id, &u.audio))
        .collect::<Result<Vec<_>, String>>()
        .map_err(|msg| PipelineError::stage(stage, msg))
}

/// Character-target items for the joint objective.
fn joint_items(
    manifest: &Manifest,
    feats: Vec<FeatureMatrix<Real>>,
    cmvn: &CmvnStats<Real>,
    vocab: &Vocabulary,
    pseudo_ids: Option<&BTreeSet<String>>,
) -> Vec<TrainItem<Real>> {
    manifest
        .utterances
        .iter()
        .zip(feats)
        .map(|(utt, fm)| {
            let text = utt.text.as_deref().unwrap_or("");
            let (targets, _unk) = vocab.encode(text);
            TrainItem {
                utt_id: utt.utt_id.clone(),
                feats: apply_cmvn(&fm, cmvn).frames,
                targets,
                duration_s: utt.duration_s,
                weight: utt.weight,
                pseudo: pseudo_ids.is_some_and(|ids| ids.contains(&utt.utt_id)),
            }
        })
        .collect()
}

/// Cluster-target items for the frame objective.
fn frame_items(
    stage: Stage,
    manifest: &Manifest,
    feats: Vec<FeatureMatrix<Real>>,
    cmvn: &CmvnStats<Real>,
    targets: &ClusterTargets,
) -> Result<Vec<TrainItem<Real>>, PipelineError> {
    manifest
        .utterances
        .iter()
        .zip(feats)
        .map(|(utt, fm)| {
            let labels = targets
                .get(&utt.utt_id)
                .map_err(|e| PipelineError::stage(stage, e))?;
            Ok(TrainItem {
                utt_id: utt.utt_id.clone(),
                feats: apply_cmvn(&fm, cmvn).frames,
                targets: labels.iter().map(|&l| l as usize).collect(),
                duration_s: utt.duration_s,
                weight: utt.weight,
                pseudo: false,
            })
        })
        .collect()
}

fn write_cmvn(dir: &Path, stats: &CmvnStats<Real>) -> Result<(), PipelineError> {
    let text = serde_json::to_string(stats)
        .map_err(|e| PipelineError::Config(format!("serialize cmvn: {e}")))?;
    fs::write(dir.join(CMVN_FILE), text)?;
    Ok(())
}

fn read_cmvn(ctx: &StageCtx<'_>, stage: Stage, from: Stage) -> Result<CmvnStats<Real>, PipelineError> {
    let path = ctx.outputs_dir(from).join(CMVN_FILE);
    if !path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            stage: stage.name().to_string(),
            artifact: format!("stages/{from}/outputs/{CMVN_FILE}"),
        });
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))
}

fn load_stage_checkpoint(
    ctx: &StageCtx<'_>,
    stage: Stage,
    from: Stage,
) -> Result<Checkpoint<Real>, PipelineError> {
    let dir = ctx.outputs_dir(from).join("best");
    if !dir.exists() {
        return Err(PipelineError::MissingPrerequisite {
            stage: stage.name().to_string(),
            artifact: format!("stages/{from}/outputs/best"),
        });
    }
    load_checkpoint(&dir).map_err(|e| PipelineError::stage(stage, e))
}

// ---------------------------------------------------------------------------
// language model construction

struct LmBundle {
    lexicon: Lexicon,
    word_lm: NgramLm,
    char_lm: NgramLm,
}

fn build_lms(
    stage: Stage,
    texts: &[String],
    vocab: &Vocabulary,
    word_order: usize,
    char_order: usize,
) -> Result<LmBundle, PipelineError> {
    if texts.is_empty() {
        return Err(PipelineError::stage(
            stage,
            "no transcribed text available to build language models",
        ));
    }
    let lexicon = lexicon_from_texts(texts.iter().map(String::as_str), vocab)
        .map_err(|e| PipelineError::stage(stage, e))?;
    let words: Vec<Vec<String>> = texts.iter().map(|t| word_symbols(t)).collect();
    let chars: Vec<Vec<String>> = texts.iter().map(|t| char_symbols(t)).collect();
    let word_lm = train_ngram(&words, word_order, Smoothing::WittenBell)
        .map_err(|e| PipelineError::stage(stage, e))?;
    let char_lm = train_ngram(&chars, char_order, Smoothing::WittenBell)
        .map_err(|e| PipelineError::stage(stage, e))?;
    Ok(LmBundle {
        lexicon,
        word_lm,
        char_lm,
    })
}

// ---------------------------------------------------------------------------
// hash payloads

fn manifest_digest(ctx: &StageCtx<'_>, name: &str) -> Result<String, PipelineError> {
    let path = corpus_file(ctx, name)?;
    Ok(super::sha256_hex(&fs::read(&path)?))
}

fn corpus_digests(
    ctx: &StageCtx<'_>,
    names: &[&str],
) -> Result<BTreeMap<String, String>, PipelineError> {
    names
        .iter()
        .map(|n| Ok(((*n).to_string(), manifest_digest(ctx, n)?)))
        .collect()
}

/// Sorted utterance ids of the resolved supervision subset; hashing the
/// resolved ids (rather than the knobs) lets equivalent settings share
/// completed stages.
fn subset_ids(ctx: &StageCtx<'_>) -> Result<Vec<String>, PipelineError> {
    let subset = cs_gold_subset(ctx)?;
    let mut ids: Vec<String> = subset.utterances.into_iter().map(|u| u.utt_id).collect();
    ids.sort();
    Ok(ids)
}

/// The configuration slice a stage actually consumes, for marker hashing.
pub(super) fn stage_payload(
    ctx: &StageCtx<'_>,
    stage: Stage,
) -> Result<serde_json::Value, PipelineError> {
    let s = &ctx.cfg.shared;
    let core = json!({
        "model": s.model,
        "fbank": s.fbank,
        "normalizer": s.normalizer,
        "seed": s.seed,
        "holdout_frac": s.holdout_frac,
    });
    let weights = json!({ "read_weight": s.read_weight, "cs_weight": s.cs_weight });
    let value = match stage {
        Stage::BaselineSupervised => json!({
            "core": core,
            "weights": weights,
            "corpus": corpus_digests(ctx, &[READ_MANIFEST, CS_MANIFEST])?,
            "subset": subset_ids(ctx)?,
            "train": ctx.cfg.baseline_supervised,
        }),
        Stage::DumpFeatures => json!({
            "core": core,
            "corpus": corpus_digests(ctx, &[READ_MANIFEST, CS_MANIFEST, UNTRANSCRIBED_MANIFEST])?,
            "layer": ctx.cfg.dump_layer()?,
        }),
        Stage::Kmeans => json!({
            "seed": s.seed,
            "kmeans": ctx.cfg.kmeans,
        }),
        Stage::SslPretrain => json!({
            "core": core,
            "corpus": corpus_digests(ctx, &[READ_MANIFEST, CS_MANIFEST, UNTRANSCRIBED_MANIFEST])?,
            "k": ctx.cfg.kmeans.k,
            "ssl": ctx.cfg.ssl_pretrain,
        }),
        Stage::Finetune => json!({
            "core": core,
            "weights": weights,
            "corpus": corpus_digests(ctx, &[READ_MANIFEST, CS_MANIFEST])?,
            "subset": subset_ids(ctx)?,
            "train": ctx.cfg.finetune,
        }),
        Stage::Pseudotranscribe => json!({
            "core": core,
            "weights": weights,
            "corpus": corpus_digests(ctx, &[READ_MANIFEST, CS_MANIFEST, UNTRANSCRIBED_MANIFEST])?,
            "subset": subset_ids(ctx)?,
            "pseudo": ctx.cfg.pseudotranscribe,
        }),
        Stage::SstTrain => json!({
            "core": core,
            "weights": weights,
            "corpus": corpus_digests(ctx, &[READ_MANIFEST, CS_MANIFEST, UNTRANSCRIBED_MANIFEST])?,
            "subset": subset_ids(ctx)?,
            "sst": ctx.cfg.sst_train,
        }),
        Stage::FinalFinetune => json!({
            "core": core,
            "cs_weight": s.cs_weight,
            "corpus": corpus_digests(ctx, &[CS_MANIFEST])?,
            "subset": subset_ids(ctx)?,
            "train": ctx.cfg.final_finetune,
        }),
        Stage::Evaluate => {
            let mut conditions = BTreeMap::new();
            for cond in resolve_conditions(ctx)? {
                conditions.insert(cond.name().to_string(), stage_hash(ctx, cond)?);
            }
            json!({
                "core": core,
                "weights": weights,
                "corpus": corpus_digests(ctx, &[TEST_MANIFEST, READ_MANIFEST, CS_MANIFEST])?,
                "subset": subset_ids(ctx)?,
                "evaluate": ctx.cfg.evaluate,
                "conditions": conditions,
            })
        }
    };
    Ok(value)
}

// ---------------------------------------------------------------------------
// training scaffolding shared by the four trainer-backed stages

struct TrainRun<'a> {
    stage: Stage,
    vocab: &'a Vocabulary,
    train_cfg: &'a crate::train::TrainConfig,
    objective: Objective,
    train_items: &'a [TrainItem<Real>],
    val_items: &'a [TrainItem<Real>],
    parent: Option<String>,
}

fn run_training(ctx: &StageCtx<'_>, run: TrainRun<'_>, params: crate::model::ParamStore<Real>)
    -> Result<TrainOutcome, PipelineError>
{
    let out = ctx.outputs_dir(run.stage);
    let session = TrainSession {
        model_cfg: &ctx.cfg.shared.model,
        train_cfg: run.train_cfg,
        vocab: run.vocab,
        objective: run.objective,
        train_items: run.train_items,
        val_items: run.val_items,
        out_dir: Some(&out),
        seed: ctx.stage_seed(run.stage),
        stage_name: run.stage.name(),
        parent: run.parent,
    };
    let (_params, outcome) = session
        .run(params)
        .map_err(|e| PipelineError::stage(run.stage, e))?;
    if outcome.diverged {
        return Err(PipelineError::stage(run.stage, "training diverged"));
    }
    if outcome.best_checkpoint.is_none() {
        return Err(PipelineError::stage(
            run.stage,
            "training finished without a usable checkpoint",
        ));
    }
    let text = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
    fs::write(out.join("outcome.json"), text)?;
    Ok(outcome)
}

fn training_note(outcome: &TrainOutcome) -> Option<String> {
    Some(format!(
        "best epoch {} (val loss {:.4}) after {} epochs",
        outcome.best_epoch, outcome.best_val_loss, outcome.epochs_run
    ))
}

const TRAIN_OUTPUTS: [&str; 4] = [
    "outputs/best",
    "outputs/cmvn.json",
    "outputs/train_log.jsonl",
    "outputs/outcome.json",
];

fn train_outputs() -> Vec<String> {
    TRAIN_OUTPUTS.iter().map(|s| (*s).to_string()).collect()
}

// ---------------------------------------------------------------------------
// the stages

pub(super) fn execute(
    ctx: &StageCtx<'_>,
    stage: Stage,
) -> Result<(Vec<String>, Option<String>), PipelineError> {
    match stage {
        Stage::BaselineSupervised => run_baseline(ctx),
        Stage::DumpFeatures => run_dump_features(ctx),
        Stage::Kmeans => run_kmeans(ctx),
        Stage::SslPretrain => run_ssl_pretrain(ctx),
        Stage::Finetune => run_finetune(ctx),
        Stage::Pseudotranscribe => run_pseudotranscribe(ctx),
        Stage::SstTrain => run_sst_train(ctx),
        Stage::FinalFinetune => run_final_finetune(ctx),
        Stage::Evaluate => run_evaluate(ctx),
    }
}

/// Supervised attention/CTC model trained from random initialization on
/// whatever transcribed data the supervision knobs allow.
fn run_baseline(ctx: &StageCtx<'_>) -> Result<(Vec<String>, Option<String>), PipelineError> {
    let stage = Stage::BaselineSupervised;
    let parts = gold_parts(ctx)?;
    if parts.is_empty() {
        return Err(PipelineError::stage(
            stage,
            "no transcribed training data: both corpus parts are empty or weighted to zero",
        ));
    }
    let texts = gold_texts(&parts);
    let vocab = Vocabulary::build(texts.iter().map(String::as_str));
    let mixed = mix_manifests(&parts).map_err(|e| PipelineError::stage(stage, e))?;
    let (train_man, val_man) =
        split_holdout(&mixed, ctx.cfg.shared.holdout_frac, ctx.stage_seed(stage) ^ 1);
    let train_feats = raw_feats(ctx, stage, &train_man)?;
    let val_feats = raw_feats(ctx, stage, &val_man)?;
    let cmvn = estimate_cmvn(train_feats.iter());
    let train_items = joint_items(&train_man, train_feats, &cmvn, &vocab, None);
    let val_items = joint_items(&val_man, val_feats, &cmvn, &vocab, None);

    let params = init_model_params(
        &ctx.cfg.shared.model,
        ctx.cfg.shared.fbank.num_mel_bins,
        vocab.size(),
        ctx.stage_seed(stage),
    );
    let outcome = run_training(
        ctx,
        TrainRun {
            stage,
            vocab: &vocab,
            train_cfg: &ctx.cfg.baseline_supervised.train,
            objective: Objective::Joint {
                lambda: ctx.cfg.shared.model.ctc_weight,
            },
            train_items: &train_items,
            val_items: &val_items,
            parent: None,
        },
        params,
    )?;
    write_cmvn(&ctx.outputs_dir(stage), &cmvn)?;
    Ok((train_outputs(), training_note(&outcome)))
}

/// Run every pool utterance through the baseline encoder and archive the
/// chosen block's output as clustering features.
fn run_dump_features(ctx: &StageCtx<'_>) -> Result<(Vec<String>, Option<String>), PipelineError> {
    let stage = Stage::DumpFeatures;
    let ckpt = load_stage_checkpoint(ctx, stage, Stage::BaselineSupervised)?;
    let cmvn = read_cmvn(ctx, stage, Stage::BaselineSupervised)?;
    let pool = audio_pool(ctx, stage)?;
    let layer = ctx.cfg.dump_layer()?;
    let subsample = ctx.cfg.shared.model.subsample_factor as f64;

    let dumped: Vec<FeatureMatrix<Real>> = pool
        .utterances
        .par_iter()
        .map(|utt| {
            let fm = utt_feats(ctx, &utt.utt_id, &utt.audio)?;
            let normed = apply_cmvn(&fm, &cmvn);
            let out = encoder_layer_output(&ckpt.config, &ckpt.params, &normed.frames, layer)
                .map_err(|e| format!("{}: {e}", utt.utt_id))?;
            Ok(FeatureMatrix {
                utt_id: utt.utt_id.clone(),
                frames: out,
                frame_shift_s: fm.frame_shift_s * subsample,
                frame_length_s: fm.frame_length_s,
            })
        })
        .collect::<Result<Vec<_>, String>>()
        .map_err(|msg| PipelineError::stage(stage, msg))?;

    let out = ctx.outputs_dir(stage);
    let mut writer = ArchiveWriter::create(&out.join("feats.bin"), &out.join("feats.idx"))
        .map_err(|e| PipelineError::stage(stage, e))?;
    for fm in &dumped {
        writer.append(fm).map_err(|e| PipelineError::stage(stage, e))?;
    }
    writer.finish().map_err(|e| PipelineError::stage(stage, e))?;
    let note = format!("{} utterances from encoder block {layer}", dumped.len());
    Ok((
        vec!["outputs/feats.bin".to_string(), "outputs/feats.idx".to_string()],
        Some(note),
    ))
}

/// Fit k-means on a pooled sample of the dumped features and label every
/// frame of the pool with its nearest centroid.
fn run_kmeans(ctx: &StageCtx<'_>) -> Result<(Vec<String>, Option<String>), PipelineError> {
    let stage = Stage::Kmeans;
    let dump_out = ctx.outputs_dir(Stage::DumpFeatures);
    let data = dump_out.join("feats.bin");
    let index = dump_out.join("feats.idx");
    if !data.exists() || !index.exists() {
        return Err(PipelineError::MissingPrerequisite {
            stage: stage.name().to_string(),
            artifact: "stages/dump_features/outputs/feats.bin".to_string(),
        });
    }
    let mut reader =
        ArchiveReader::open(&data, &index).map_err(|e| PipelineError::stage(stage, e))?;
    let ids: Vec<String> = reader.utt_ids().cloned().collect();
    let mut mats = Vec::with_capacity(ids.len());
    for id in &ids {
        let fm: FeatureMatrix<Real> =
            reader.read(id).map_err(|e| PipelineError::stage(stage, e))?;
        mats.push(fm.frames);
    }

    let kc = &ctx.cfg.kmeans;
    let seed = ctx.stage_seed(stage);
    let sample = pool_fitting_sample(&mats, kc.max_frames, seed);
    let (model, fit) = fit_cluster_model(&sample, ctx.cfg.dump_layer()?, kc.k, seed, kc.max_iters)
        .map_err(|e| PipelineError::stage(stage, e))?;

    let out = ctx.outputs_dir(stage);
    save_cluster_model(&out.join("clusters.bin"), &model)
        .map_err(|e| PipelineError::stage(stage, e))?;
    let mut targets = ClusterTargets::new();
    for (id, mat) in ids.iter().zip(&mats) {
        let labels = model.assign(mat).map_err(|e| PipelineError::stage(stage, e))?;
        targets.insert(id.clone(), labels);
    }
    targets
        .write_jsonl(&out.join("targets.jsonl"))
        .map_err(|e| PipelineError::stage(stage, e))?;

    let report = json!({
        "k": kc.k,
        "sample_frames": sample.rows(),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "distortion": fit.distortion(),
        "distortion_per_iter": fit.distortion_per_iter,
    });
    fs::write(
        out.join("kmeans_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let note = format!(
        "k={} distortion {:.5} after {} iterations",
        kc.k,
        fit.distortion(),
        fit.iterations
    );
    Ok((
        vec![
            "outputs/clusters.bin".to_string(),
            "outputs/clusters.bin.json".to_string(),
            "outputs/targets.jsonl".to_string(),
            "outputs/kmeans_report.json".to_string(),
        ],
        Some(note),
    ))
}

/// Train the encoder from random initialization to predict the cluster id
/// of masked frames over the whole audio pool.
fn run_ssl_pretrain(ctx: &StageCtx<'_>) -> Result<(Vec<String>, Option<String>), PipelineError> {
    let stage = Stage::SslPretrain;
    let targets_path = ctx.outputs_dir(Stage::Kmeans).join("targets.jsonl");
    if !targets_path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            stage: stage.name().to_string(),
            artifact: "stages/kmeans/outputs/targets.jsonl".to_string(),
        });
    }
    let targets =
        ClusterTargets::read_jsonl(&targets_path).map_err(|e| PipelineError::stage(stage, e))?;
    let pool = audio_pool(ctx, stage)?;
    // The decoder is untouched here, so its vocabulary only has to exist;
    // read speech is always transcribed and supervision-independent.
    let read = load_manifest(ctx, READ_MANIFEST, Role::Read)?;
    let read_texts: Vec<String> = read
        .utterances
        .iter()
        .filter_map(|u| u.text.clone())
        .collect();
    let vocab = Vocabulary::build(read_texts.iter().map(String::as_str));

    let (train_man, val_man) =
        split_holdout(&pool, ctx.cfg.shared.holdout_frac, ctx.stage_seed(stage) ^ 1);
    let train_feats = raw_feats(ctx, stage, &train_man)?;
    let val_feats = raw_feats(ctx, stage, &val_man)?;
    let cmvn = estimate_cmvn(train_feats.iter());
    let train_items = frame_items(stage, &train_man, train_feats, &cmvn, &targets)?;
    let val_items = frame_items(stage, &val_man, val_feats, &cmvn, &targets)?;

    let n_mels = ctx.cfg.shared.fbank.num_mel_bins;
    let seed = ctx.stage_seed(stage);
    let mut params = init_model_params(&ctx.cfg.shared.model, n_mels, vocab.size(), seed);
    add_ssl_params(
        &mut params,
        &ctx.cfg.shared.model,
        n_mels,
        ctx.cfg.kmeans.k,
        seed,
    );
    let outcome = run_training(
        ctx,
        TrainRun {
            stage,
            vocab: &vocab,
            train_cfg: &ctx.cfg.ssl_pretrain.train,
            objective: Objective::FrameCe {
                mask: Some(ctx.cfg.ssl_pretrain.mask.clone()),
            },
            train_items: &train_items,
            val_items: &val_items,
            parent: None,
        },
        params,
    )?;
    write_cmvn(&ctx.outputs_dir(stage), &cmvn)?;
    Ok((train_outputs(), training_note(&outcome)))
}

/// Adopt the pretrained encoder, attach a freshly initialized decoder and
/// CTC head, and train on the gold data.
fn run_finetune(ctx: &StageCtx<'_>) -> Result<(Vec<String>, Option<String>), PipelineError> {
    let stage = Stage::Finetune;
    let ssl = load_stage_checkpoint(ctx, stage, Stage::SslPretrain)?;
    let cmvn = read_cmvn(ctx, stage, Stage::SslPretrain)?;
    let parts = gold_parts(ctx)?;
    if parts.is_empty() {
        return Err(PipelineError::stage(
            stage,
            "no transcribed training data: both corpus parts are empty or weighted to zero",
        ));
    }
    let texts = gold_texts(&parts);
    let vocab = Vocabulary::build(texts.iter().map(String::as_str));
    let mixed = mix_manifests(&parts).map_err(|e| PipelineError::stage(stage, e))?;
    let (train_man, val_man) =
        split_holdout(&mixed, ctx.cfg.shared.holdout_frac, ctx.stage_seed(stage) ^ 1);
    let train_feats = raw_feats(ctx, stage, &train_man)?;
    let val_feats = raw_feats(ctx, stage, &val_man)?;
    let train_items = joint_items(&train_man, train_feats, &cmvn, &vocab, None);
    let val_items = joint_items(&val_man, val_feats, &cmvn, &vocab, None);

    let mut params = init_model_params(
        &ctx.cfg.shared.model,
        ctx.cfg.shared.fbank.num_mel_bins,
        vocab.size(),
        ctx.stage_seed(stage),
    );
    params
        .adopt_prefix(&ssl.params, "enc.")
        .map_err(|e| PipelineError::stage(stage, e))?;
    let outcome = run_training(
        ctx,
        TrainRun {
            stage,
            vocab: &vocab,
            train_cfg: &ctx.cfg.finetune.train,
            objective: Objective::Joint {
                lambda: ctx.cfg.shared.model.ctc_weight,
            },
            train_items: &train_items,
            val_items: &val_items,
            parent: Some(ssl.provenance.as_parent()),
        },
        params,
    )?;
    write_cmvn(&ctx.outputs_dir(stage), &cmvn)?;
    Ok((train_outputs(), training_note(&outcome)))
}

/// Transcribe the untranscribed pool with the configured transcriber and
/// keep the hypotheses that survive the filter policy.
fn run_pseudotranscribe(
    ctx: &StageCtx<'_>,
) -> Result<(Vec<String>, Option<String>), PipelineError> {
    let stage = Stage::Pseudotranscribe;
    let pc = &ctx.cfg.pseudotranscribe;
    let un = load_manifest(ctx, UNTRANSCRIBED_MANIFEST, Role::UntranscribedCs)?;
    let out = ctx.outputs_dir(stage);
    let work = out.join("work");
    let my_hash = stage_hash(ctx, stage)?;
    let corpus = ctx.corpus_dir();

    let set = match pc.transcriber {
        TranscriberKind::ExternalCommand => {
            let transcriber: Transcriber<'_, Real> = Transcriber::ExternalCommand {
                template: pc.external_command.clone(),
            };
            pseudotranscribe(&un, &transcriber, &corpus, &work, &my_hash)
                .map_err(|e| PipelineError::stage(stage, e))?
        }
        kind => {
            let ckpt = load_stage_checkpoint(ctx, stage, Stage::Finetune)?;
            let cmvn = read_cmvn(ctx, stage, Stage::Finetune)?;
            let texts = gold_texts(&gold_parts(ctx)?);
            let lms = build_lms(stage, &texts, &ckpt.vocab, pc.word_lm_order, pc.char_lm_order)?;
            let mut decode = pc.decode.clone();
            decode.mode = match kind {
                TranscriberKind::InternalCtcLexLm => DecodeMode::CtcBeamLm,
                TranscriberKind::InternalJoint => DecodeMode::JointAttention,
                TranscriberKind::ExternalCommand => unreachable!(),
            };
            let setup = TranscribeSetup {
                model_cfg: &ckpt.config,
                params: &ckpt.params,
                vocab: &ckpt.vocab,
                fbank: &ctx.cfg.shared.fbank,
                cmvn: Some(&cmvn),
                decode: &decode,
                lexicon: Some(&lms.lexicon),
                word_lm: Some(&lms.word_lm),
                char_lm: Some(&lms.char_lm),
            };
            let transcriber = match kind {
                TranscriberKind::InternalCtcLexLm => Transcriber::InternalCtcLexLm(setup),
                TranscriberKind::InternalJoint => Transcriber::InternalJoint(setup),
                TranscriberKind::ExternalCommand => unreachable!(),
            };
            pseudotranscribe(&un, &transcriber, &corpus, &work, &my_hash)
                .map_err(|e| PipelineError::stage(stage, e))?
        }
    };

    let filtered =
        filter_pseudolabels(&set, &pc.filter).map_err(|e| PipelineError::stage(stage, e))?;
    filtered
        .save(&out.join("pseudo.tsv"))
        .map_err(|e| PipelineError::stage(stage, e))?;
    let report = &filtered.filter_report;
    let note = format!(
        "kept {}/{} machine transcripts ({} dropped)",
        report.kept,
        report.input,
        report.dropped_total()
    );
    Ok((
        vec!["outputs/pseudo.tsv".to_string(), "outputs/pseudo.tsv.json".to_string()],
        Some(note),
    ))
}

/// Mix gold and machine-labelled utterances and continue training from the
/// configured checkpoint.
fn run_sst_train(ctx: &StageCtx<'_>) -> Result<(Vec<String>, Option<String>), PipelineError> {
    let stage = Stage::SstTrain;
    let init_stage = Stage::parse(&ctx.cfg.sst_train.init_stage)
        .expect("init_stage validated at config load");
    let init = load_stage_checkpoint(ctx, stage, init_stage)?;
    let cmvn = read_cmvn(ctx, stage, init_stage)?;
    let pseudo_path = ctx.outputs_dir(Stage::Pseudotranscribe).join("pseudo.tsv");
    if !pseudo_path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            stage: stage.name().to_string(),
            artifact: "stages/pseudotranscribe/outputs/pseudo.tsv".to_string(),
        });
    }
    let pseudo =
        PseudoLabelSet::load(&pseudo_path).map_err(|e| PipelineError::stage(stage, e))?;
    let un = load_manifest(ctx, UNTRANSCRIBED_MANIFEST, Role::UntranscribedCs)?;

    let parts = gold_parts(ctx)?;
    if parts.is_empty() {
        return Err(PipelineError::stage(
            stage,
            "no gold data to anchor the mixed training pool",
        ));
    }
    let gold_mixed = mix_manifests(&parts).map_err(|e| PipelineError::stage(stage, e))?;
    let (gold_train, gold_val) =
        split_holdout(&gold_mixed, ctx.cfg.shared.holdout_frac, ctx.stage_seed(stage) ^ 1);
    let mixture = merge_for_sst(
        &[(gold_train, 1.0)],
        &un,
        &pseudo,
        ctx.cfg.sst_train.pseudo_weight,
    )
    .map_err(|e| PipelineError::stage(stage, e))?;

    let vocab = init.vocab.clone();
    let train_feats = raw_feats(ctx, stage, &mixture.manifest)?;
    let val_feats = raw_feats(ctx, stage, &gold_val)?;
    let train_items = joint_items(
        &mixture.manifest,
        train_feats,
        &cmvn,
        &vocab,
        Some(&mixture.pseudo_ids),
    );
    let val_items = joint_items(&gold_val, val_feats, &cmvn, &vocab, None);

    let params = match init_stage {
        Stage::Finetune => init.params.clone(),
        Stage::SslPretrain => {
            let mut p = init_model_params(
                &ctx.cfg.shared.model,
                ctx.cfg.shared.fbank.num_mel_bins,
                vocab.size(),
                ctx.stage_seed(stage),
            );
            p.adopt_prefix(&init.params, "enc.")
                .map_err(|e| PipelineError::stage(stage, e))?;
            p
        }
        other => {
            return Err(PipelineError::stage(
                stage,
                format!("cannot initialize from stage '{other}'"),
            ))
        }
    };

    let gold_count = train_items.iter().filter(|i| !i.pseudo).count();
    let pseudo_count = train_items.len() - gold_count;
    let outcome = run_training(
        ctx,
        TrainRun {
            stage,
            vocab: &vocab,
            train_cfg: &ctx.cfg.sst_train.train,
            objective: Objective::Joint {
                lambda: ctx.cfg.shared.model.ctc_weight,
            },
            train_items: &train_items,
            val_items: &val_items,
            parent: Some(init.provenance.as_parent()),
        },
        params,
    )?;
    write_cmvn(&ctx.outputs_dir(stage), &cmvn)?;
    let note = format!(
        "{gold_count} gold + {pseudo_count} pseudo utterances; {}",
        training_note(&outcome).unwrap_or_default()
    );
    Ok((train_outputs(), Some(note)))
}

/// Final adaptation on in-domain gold data only. With no such data the
/// previous checkpoint is passed through unchanged.
fn run_final_finetune(
    ctx: &StageCtx<'_>,
) -> Result<(Vec<String>, Option<String>), PipelineError> {
    let stage = Stage::FinalFinetune;
    let sst = load_stage_checkpoint(ctx, stage, Stage::SstTrain)?;
    let cmvn = read_cmvn(ctx, stage, Stage::SstTrain)?;
    let cs = cs_gold_subset(ctx)?;
    let out = ctx.outputs_dir(stage);

    if cs.utterances.is_empty() || ctx.cfg.shared.cs_weight == 0.0 {
        let note = "no in-domain transcribed data; checkpoint passed through unchanged";
        log::warn!("stage {stage}: {note}");
        let provenance = Provenance {
            stage: stage.name().to_string(),
            parent: Some(sst.provenance.as_parent()),
            seed: ctx.stage_seed(stage),
            note: Some(note.to_string()),
            ..Provenance::default()
        };
        save_checkpoint(&out.join("best"), &sst.config, &sst.vocab, &sst.params, &provenance)
            .map_err(|e| PipelineError::stage(stage, e))?;
        write_cmvn(&out, &cmvn)?;
        return Ok((
            vec!["outputs/best".to_string(), "outputs/cmvn.json".to_string()],
            Some(note.to_string()),
        ));
    }

    let vocab = sst.vocab.clone();
    let (train_man, val_man) =
        split_holdout(&cs, ctx.cfg.shared.holdout_frac, ctx.stage_seed(stage) ^ 1);
    let train_feats = raw_feats(ctx, stage, &train_man)?;
    let val_feats = raw_feats(ctx, stage, &val_man)?;
    let train_items = joint_items(&train_man, train_feats, &cmvn, &vocab, None);
    let val_items = joint_items(&val_man, val_feats, &cmvn, &vocab, None);
    let outcome = run_training(
        ctx,
        TrainRun {
            stage,
            vocab: &vocab,
            train_cfg: &ctx.cfg.final_finetune.train,
            objective: Objective::Joint {
                lambda: ctx.cfg.shared.model.ctc_weight,
            },
            train_items: &train_items,
            val_items: &val_items,
            parent: Some(sst.provenance.as_parent()),
        },
        sst.params.clone(),
    )?;
    write_cmvn(&out, &cmvn)?;
    Ok((train_outputs(), training_note(&outcome)))
}

/// Checkpoint stages that can be scored on the test set.
const CONDITION_STAGES: [Stage; 4] = [
    Stage::BaselineSupervised,
    Stage::Finetune,
    Stage::SstTrain,
    Stage::FinalFinetune,
];

fn resolve_conditions(ctx: &StageCtx<'_>) -> Result<Vec<Stage>, PipelineError> {
    let wanted = &ctx.cfg.evaluate.conditions;
    if wanted.is_empty() {
        return Ok(CONDITION_STAGES
            .into_iter()
            .filter(|s| ctx.marker_path(*s).exists())
            .collect());
    }
    let mut out = Vec::new();
    for name in wanted {
        let stage = Stage::parse(name).filter(|s| CONDITION_STAGES.contains(s)).ok_or_else(|| {
            PipelineError::Config(format!(
                "evaluate.conditions entry '{name}' is not a checkpoint stage"
            ))
        })?;
        if !ctx.marker_path(stage).exists() {
            return Err(PipelineError::MissingPrerequisite {
                stage: Stage::Evaluate.name().to_string(),
                artifact: format!("stages/{stage}/marker.json"),
            });
        }
        if out.contains(&stage) {
            return Err(PipelineError::Config(format!(
                "evaluate.conditions lists '{name}' twice"
            )));
        }
        out.push(stage);
    }
    Ok(out)
}

/// Decode the test set with every scored checkpoint and write word and
/// character error-rate reports plus a comparison table.
fn run_evaluate(ctx: &StageCtx<'_>) -> Result<(Vec<String>, Option<String>), PipelineError> {
    let stage = Stage::Evaluate;
    let conditions = resolve_conditions(ctx)?;
    if conditions.is_empty() {
        return Err(PipelineError::stage(
            stage,
            "no completed checkpoint stages to evaluate",
        ));
    }
    // A stale upstream marker means the checkpoint no longer matches the
    // configuration being scored.
    for cond in &conditions {
        let marker = ctx.read_marker(*cond)?.ok_or_else(|| {
            PipelineError::MissingPrerequisite {
                stage: stage.name().to_string(),
                artifact: format!("stages/{cond}/marker.json"),
            }
        })?;
        if marker.config_hash != stage_hash(ctx, *cond)? {
            return Err(PipelineError::StaleMarker {
                stage: cond.name().to_string(),
            });
        }
    }

    let test = load_manifest(ctx, TEST_MANIFEST, Role::TranscribedCs)?;
    if test.utterances.is_empty() {
        return Err(PipelineError::stage(stage, "test manifest is empty"));
    }
    let refs: BTreeMap<String, String> = test
        .utterances
        .iter()
        .map(|u| (u.utt_id.clone(), u.text.clone().unwrap_or_default()))
        .collect();
    let texts = gold_texts(&gold_parts(ctx)?);
    let supervised_hours = cs_gold_subset(ctx)?.total_duration_s() / 3600.0;

    let out = ctx.outputs_dir(stage);
    let reports_dir = ctx.reports_dir();
    fs::create_dir_all(&reports_dir)?;
    let mut outputs = Vec::new();
    let mut wer_reports: Vec<(String, ScoreReport)> = Vec::new();

    for cond in &conditions {
        let ckpt = load_stage_checkpoint(ctx, stage, *cond)?;
        let cmvn = read_cmvn(ctx, stage, *cond)?;
        let ec = &ctx.cfg.evaluate;
        let lms = build_lms(stage, &texts, &ckpt.vocab, ec.word_lm_order, ec.char_lm_order)?;
        let setup = TranscribeSetup {
            model_cfg: &ckpt.config,
            params: &ckpt.params,
            vocab: &ckpt.vocab,
            fbank: &ctx.cfg.shared.fbank,
            cmvn: Some(&cmvn),
            decode: &ec.decode,
            lexicon: Some(&lms.lexicon),
            word_lm: Some(&lms.word_lm),
            char_lm: Some(&lms.char_lm),
        };
        let hyp_tsv = out.join(format!("{cond}_hyps.tsv"));
        let err_tsv = out.join(format!("{cond}_errors.tsv"));
        let summary = transcribe_manifest(&setup, &test, &ctx.corpus_dir(), &hyp_tsv, &err_tsv)
            .map_err(|e| PipelineError::stage(stage, e))?;
        if summary.failed > 0 {
            log::warn!(
                "stage {stage}: {} of {} test utterances failed to decode under '{cond}' \
                 and score as empty hypotheses",
                summary.failed,
                test.utterances.len()
            );
        }
        outputs.push(format!("outputs/{cond}_hyps.tsv"));
        outputs.push(format!("outputs/{cond}_errors.tsv"));

        let mut hyps: BTreeMap<String, String> =
            refs.keys().map(|k| (k.clone(), String::new())).collect();
        for row in read_hypotheses_tsv(&hyp_tsv).map_err(|e| PipelineError::stage(stage, e))? {
            hyps.insert(row.utt_id, row.text);
        }

        let meta = ConditionMeta {
            label: cond.name().to_string(),
            supervised_hours,
            stages: ckpt.provenance.chain(),
        };
        let mut wer = word_error_rate(&refs, &hyps).map_err(|e| PipelineError::stage(stage, e))?;
        wer.condition = Some(meta.clone());
        let mut cer =
            character_error_rate(&refs, &hyps).map_err(|e| PipelineError::stage(stage, e))?;
        cer.condition = Some(meta);

        let wer_path = reports_dir.join(format!("{cond}.wer.json"));
        let cer_path = reports_dir.join(format!("{cond}.cer.json"));
        let align_path = reports_dir.join(format!("{cond}.align.txt"));
        wer.write_json(&wer_path).map_err(|e| PipelineError::stage(stage, e))?;
        cer.write_json(&cer_path).map_err(|e| PipelineError::stage(stage, e))?;
        wer.write_alignment_text(&align_path)
            .map_err(|e| PipelineError::stage(stage, e))?;
        log::info!(
            "stage {stage}: {cond} WER {:.2} CER {:.2}",
            wer.error_rate,
            cer.error_rate
        );
        wer_reports.push((cond.name().to_string(), wer));
    }

    if wer_reports.len() >= 2 {
        let baseline = wer_reports[0].0.clone();
        let table = compare_conditions(&wer_reports, &baseline)
            .map_err(|e| PipelineError::stage(stage, e))?;
        fs::write(reports_dir.join("comparison.tsv"), table)?;
    }
    let note = wer_reports
        .iter()
        .map(|(label, r)| format!("{label} WER {:.2}", r.error_rate))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((outputs, Some(note)))
}
