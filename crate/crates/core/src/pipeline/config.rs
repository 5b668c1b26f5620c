//! Experiment configuration: one TOML file with a `[shared]` section plus
//! one optional section per stage, and dotted `key=value` overrides applied
//! on top before deserialization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{SubsetStrategy, TextNormalizer};
use crate::decode::{DecodeConfig, DecodeMode};
use crate::features::FbankConfig;
use crate::model::ModelConfig;
use crate::sst::FilterPolicy;
use crate::train::{SpanMaskConfig, TrainConfig};

use super::PipelineError;

/// Settings shared by every stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharedConfig {
    /// Corpus directory; relative paths resolve against the experiment dir.
    pub corpus_dir: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub fbank: FbankConfig,
    pub normalizer: TextNormalizer,
    /// Fraction of each training pool held out for validation loss.
    pub holdout_frac: f64,
    /// Hours of transcribed conversational speech to keep; -1 keeps all,
    /// 0 runs the no-in-domain-transcripts condition.
    pub supervised_hours: f64,
    /// Alternative cap as an utterance count (random_utterance only);
    /// -1 disables. Mutually exclusive with `supervised_hours >= 0`.
    pub supervised_utts: i64,
    pub subset_strategy: SubsetStrategy,
    /// Mixing weight of the read-speech manifest in supervised pools;
    /// 0 drops it entirely.
    pub read_weight: f64,
    /// Mixing weight of the transcribed conversational subset; 0 drops it.
    pub cs_weight: f64,
}

impl Default for SharedConfig {
    fn default() -> Self {
        SharedConfig {
            corpus_dir: PathBuf::from("corpus"),
            seed: 17,
            model: ModelConfig::default(),
            fbank: FbankConfig::default(),
            normalizer: TextNormalizer::default(),
            holdout_frac: 0.05,
            supervised_hours: -1.0,
            supervised_utts: -1,
            subset_strategy: SubsetStrategy::RandomUtterance,
            read_weight: 1.0,
            cs_weight: 1.0,
        }
    }
}

/// A stage that just runs the trainer over a prepared pool.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainStageConfig {
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpFeaturesConfig {
    /// Encoder block whose output is dumped; -1 picks the middle block.
    pub layer: i64,
}

impl Default for DumpFeaturesConfig {
    fn default() -> Self {
        DumpFeaturesConfig { layer: -1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Cap on pooled fitting frames; 0 keeps everything.
    pub max_frames: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            k: 32,
            max_iters: 30,
            max_frames: 200_000,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslTrainConfig {
    pub train: TrainConfig,
    pub mask: SpanMaskConfig,
}

/// Which transcriber produces the machine labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriberKind {
    InternalCtcLexLm,
    InternalJoint,
    ExternalCommand,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub transcriber: TranscriberKind,
    /// Shell template for `external_command`, with `{manifest}` and `{out}`
    /// placeholders.
    pub external_command: String,
    /// Search settings for the internal transcribers; `mode` is forced to
    /// match `transcriber`.
    pub decode: DecodeConfig,
    pub filter: FilterPolicy,
    pub word_lm_order: usize,
    pub char_lm_order: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            transcriber: TranscriberKind::InternalCtcLexLm,
            external_command: String::new(),
            decode: DecodeConfig::ctc_beam_default(),
            filter: FilterPolicy::default(),
            word_lm_order: 2,
            char_lm_order: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SstTrainConfig {
    pub train: TrainConfig,
    /// Weight multiplier on pseudo-labelled utterances (gold stays at 1).
    pub pseudo_weight: f64,
    /// Checkpoint the mixed training starts from: `finetune` (continue the
    /// whole model) or `ssl_pretrain` (encoder only, fresh decoder).
    pub init_stage: String,
}

impl Default for SstTrainConfig {
    fn default() -> Self {
        SstTrainConfig {
            train: TrainConfig::default(),
            pseudo_weight: 1.0,
            init_stage: "finetune".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub decode: DecodeConfig,
    /// Checkpoint stages to score; empty scores every completed stage that
    /// produced one.
    pub conditions: Vec<String>,
    pub word_lm_order: usize,
    pub char_lm_order: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            decode: DecodeConfig {
                mode: DecodeMode::CtcGreedy,
                beam_size: 1,
                lm_weight: 0.0,
                ctc_weight_decode: 0.3,
                length_penalty: 0.0,
                max_output_len: 0,
            },
            conditions: Vec::new(),
            word_lm_order: 2,
            char_lm_order: 3,
        }
    }
}

/// The whole experiment configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub shared: SharedConfig,
    pub baseline_supervised: TrainStageConfig,
    pub dump_features: DumpFeaturesConfig,
    pub kmeans: KmeansConfig,
    pub ssl_pretrain: SslTrainConfig,
    pub finetune: TrainStageConfig,
    pub pseudotranscribe: PseudoConfig,
    pub sst_train: SstTrainConfig,
    pub final_finetune: TrainStageConfig,
    pub evaluate: EvaluateConfig,
}

impl PipelineConfig {
    /// Load from a TOML file (or defaults when `path` is `None`), then apply
    /// dotted `key=value` overrides and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    PipelineError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<toml::Value>()
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::Table(toml::map::Map::new()),
        };
        for raw in overrides {
            apply_override(&mut value, raw)?;
        }
        let cfg: PipelineConfig = value
            .try_into()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let s = &self.shared;
        if !(0.0..1.0).contains(&s.holdout_frac) {
            return Err(PipelineError::Config(format!(
                "shared.holdout_frac must be in [0, 1), got {}",
                s.holdout_frac
            )));
        }
        if s.read_weight < 0.0 || s.cs_weight < 0.0 {
            return Err(PipelineError::Config(
                "shared.read_weight and shared.cs_weight must be >= 0".to_string(),
            ));
        }
        if s.read_weight == 0.0 && s.cs_weight == 0.0 {
            return Err(PipelineError::Config(
                "at least one of shared.read_weight / shared.cs_weight must be positive"
                    .to_string(),
            ));
        }
        if s.supervised_hours >= 0.0 && s.supervised_utts >= 0 {
            return Err(PipelineError::Config(
                "set only one of shared.supervised_hours / shared.supervised_utts".to_string(),
            ));
        }
        if s.supervised_utts >= 0 && s.subset_strategy != SubsetStrategy::RandomUtterance {
            return Err(PipelineError::Config(
                "shared.supervised_utts requires subset_strategy = \"random_utterance\""
                    .to_string(),
            ));
        }
        if self.pseudotranscribe.transcriber == TranscriberKind::ExternalCommand
            && self.pseudotranscribe.external_command.trim().is_empty()
        {
            return Err(PipelineError::Config(
                "pseudotranscribe.external_command is required for the external transcriber"
                    .to_string(),
            ));
        }
        match self.sst_train.init_stage.as_str() {
            "finetune" | "ssl_pretrain" => {}
            other => {
                return Err(PipelineError::Config(format!(
                    "sst_train.init_stage must be \"finetune\" or \"ssl_pretrain\", got \"{other}\""
                )));
            }
        }
        if self.kmeans.k == 0 {
            return Err(PipelineError::Config("kmeans.k must be positive".to_string()));
        }
        self.pseudotranscribe
            .filter
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for (name, d) in [
            ("pseudotranscribe.decode", &self.pseudotranscribe.decode),
            ("evaluate.decode", &self.evaluate.decode),
        ] {
            d.validate()
                .map_err(|e| PipelineError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Middle encoder block when `dump_features.layer` is -1.
    pub fn dump_layer(&self) -> Result<usize, PipelineError> {
        let max = self.shared.model.enc_layers;
        match self.dump_features.layer {
            -1 => Ok(max.div_ceil(2)),
            l if l >= 0 && (l as usize) <= max => Ok(l as usize),
            l => Err(PipelineError::Config(format!(
                "dump_features.layer {l} outside 0..={max}"
            ))),
        }
    }
}

/// Parse `a.b.c=value` and set it inside the TOML value tree, creating
/// intermediate tables when missing. The right-hand side is interpreted as
/// a bool, integer, or float when it parses as one, otherwise as a string.
fn apply_override(root: &mut toml::Value, raw: &str) -> Result<(), PipelineError> {
    let (key, rhs) = raw
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override '{raw}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(PipelineError::Config(format!(
            "override '{raw}' has an empty key"
        )));
    }
    let parsed = parse_override_value(rhs.trim());
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            PipelineError::Config(format!("override '{key}': '{part}' is not a table"))
        })?;
        if i + 1 == parts.len() {
            table.insert((*part).to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry((*part).to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("split('.') yields at least one part");
}

fn parse_override_value(rhs: &str) -> toml::Value {
    if let Ok(b) = rhs.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = rhs.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = rhs.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(rhs.to_string())
}
