//! Experiment runner: a fixed stage graph from supervised baseline through
//! self-supervised pretraining, pseudo-labelling, and evaluation, with
//! content-hashed completion markers so interrupted runs resume where they
//! stopped.

mod config;
mod stages;
mod sweep;
mod toy;

pub use config::{
    DumpFeaturesConfig, EvaluateConfig, KmeansConfig, PipelineConfig, PseudoConfig, SharedConfig,
    SslTrainConfig, SstTrainConfig, TrainStageConfig, TranscriberKind,
};
pub use sweep::{sweep_supervision, SweepCondition, SweepOutcome};
pub use toy::{make_toy_corpus, ToyCorpusSpec};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid stage plan: {0}")]
    Plan(String),
    #[error("stage '{stage}' is missing prerequisite {artifact}")]
    MissingPrerequisite { stage: String, artifact: String },
    #[error(
        "stage '{stage}' was completed under a different configuration; \
         rerun with --force to redo it"
    )]
    StaleMarker { stage: String },
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit status: 2 for configuration/validation problems,
    /// 3 for failures while a stage was running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Stage { .. } | PipelineError::Io(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn stage(stage: Stage, err: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage: stage.name().to_string(),
            message: err.to_string(),
        }
    }
}

/// The stages, in canonical execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BaselineSupervised,
    DumpFeatures,
    Kmeans,
    SslPretrain,
    Finetune,
    Pseudotranscribe,
    SstTrain,
    FinalFinetune,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::BaselineSupervised,
        Stage::DumpFeatures,
        Stage::Kmeans,
        Stage::SslPretrain,
        Stage::Finetune,
        Stage::Pseudotranscribe,
        Stage::SstTrain,
        Stage::FinalFinetune,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BaselineSupervised => "baseline_supervised",
            Stage::DumpFeatures => "dump_features",
            Stage::Kmeans => "kmeans",
            Stage::SslPretrain => "ssl_pretrain",
            Stage::Finetune => "finetune",
            Stage::Pseudotranscribe => "pseudotranscribe",
            Stage::SstTrain => "sst_train",
            Stage::FinalFinetune => "final_finetune",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.iter().copied().find(|s| s.name() == name)
    }

    /// Stages whose outputs this stage reads.
    pub fn deps(self, cfg: &PipelineConfig) -> Vec<Stage> {
        match self {
            Stage::BaselineSupervised => vec![],
            Stage::DumpFeatures => vec![Stage::BaselineSupervised],
            Stage::Kmeans => vec![Stage::DumpFeatures],
            Stage::SslPretrain => vec![Stage::Kmeans],
            Stage::Finetune => vec![Stage::SslPretrain],
            Stage::Pseudotranscribe => {
                if cfg.pseudotranscribe.transcriber == TranscriberKind::ExternalCommand {
                    vec![]
                } else {
                    vec![Stage::Finetune]
                }
            }
            Stage::SstTrain => {
                let init = Stage::parse(&cfg.sst_train.init_stage)
                    .expect("init_stage validated at config load");
                let mut deps = vec![Stage::Pseudotranscribe];
                if !deps.contains(&init) {
                    deps.push(init);
                }
                deps.sort();
                deps
            }
            Stage::FinalFinetune => vec![Stage::SstTrain],
            // The evaluation stage scores whatever checkpoints exist; its
            // needs are checked against completion markers when it runs.
            Stage::Evaluate => vec![],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Completion record written at the end of a stage. A later run skips the
/// stage when the stored hash still matches the current configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Marker {
    pub stage: String,
    /// Hash over the stage's effective configuration, its input manifests,
    /// and its parents' hashes.
    pub config_hash: String,
    pub parents: BTreeMap<String, String>,
    pub completed_unix: u64,
    /// Paths relative to the stage directory.
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Everything a stage needs to know about where it runs.
pub struct StageCtx<'a> {
    pub cfg: &'a PipelineConfig,
    pub exp_dir: &'a Path,
    pub force: bool,
}

impl<'a> StageCtx<'a> {
    pub fn new(cfg: &'a PipelineConfig, exp_dir: &'a Path, force: bool) -> Self {
        StageCtx {
            cfg,
            exp_dir,
            force,
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        if self.cfg.shared.corpus_dir.is_absolute() {
            self.cfg.shared.corpus_dir.clone()
        } else {
            self.exp_dir.join(&self.cfg.shared.corpus_dir)
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.exp_dir.join("stages").join(stage.name())
    }

    pub fn outputs_dir(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("outputs")
    }

    pub fn marker_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("marker.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.exp_dir.join("reports")
    }

    pub fn read_marker(&self, stage: Stage) -> Result<Option<Marker>, PipelineError> {
        let path = self.marker_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        let marker: Marker = serde_json::from_str(&text).map_err(|e| {
            PipelineError::Plan(format!("corrupt marker {}: {e}", path.display()))
        })?;
        Ok(Some(marker))
    }

    fn write_marker(&self, stage: Stage, marker: &Marker) -> Result<(), PipelineError> {
        let path = self.marker_path(stage);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let text = serde_json::to_string_pretty(marker).expect("marker serializes");
        fs::write(&path, text)?;
        Ok(())
    }

    /// Per-stage RNG seed derived from the shared seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let idx = Stage::ALL.iter().position(|s| *s == stage).unwrap() as u64;
        self.cfg
            .shared
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ (idx.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Hash of a stage's effective inputs: a canonical JSON document holding the
/// stage name, the configuration slices it reads, digests of the corpus
/// files it consumes, and the hashes of the stages it depends on.
pub fn stage_hash(ctx: &StageCtx<'_>, stage: Stage) -> Result<String, PipelineError> {
    let mut memo = BTreeMap::new();
    stage_hash_memo(ctx, stage, &mut memo)
}

fn stage_hash_memo(
    ctx: &StageCtx<'_>,
    stage: Stage,
    memo: &mut BTreeMap<Stage, String>,
) -> Result<String, PipelineError> {
    if let Some(h) = memo.get(&stage) {
        return Ok(h.clone());
    }
    let mut parents = BTreeMap::new();
    for dep in stage.deps(ctx.cfg) {
        let h = stage_hash_memo(ctx, dep, memo)?;
        parents.insert(dep.name().to_string(), h);
    }
    let payload = stages::stage_payload(ctx, stage)?;
    let doc = serde_json::json!({
        "stage": stage.name(),
        "payload": payload,
        "parents": parents,
    });
    let hash = sha256_hex(serde_json::to_string(&doc).expect("payload serializes").as_bytes());
    memo.insert(stage, hash.clone());
    Ok(hash)
}

/// Check that a requested stage list is executable: no duplicates, and every
/// dependency either appears earlier in the list or already has a completion
/// marker on disk.
pub fn validate_plan(ctx: &StageCtx<'_>, plan: &[Stage]) -> Result<(), PipelineError> {
    let mut seen: Vec<Stage> = Vec::new();
    for &stage in plan {
        if seen.contains(&stage) {
            return Err(PipelineError::Plan(format!(
                "stage '{stage}' listed more than once"
            )));
        }
        for dep in stage.deps(ctx.cfg) {
            let planned_earlier = seen.contains(&dep);
            let completed = ctx.marker_path(dep).exists();
            if !planned_earlier && !completed {
                return Err(PipelineError::Plan(format!(
                    "stage '{stage}' needs '{dep}' first; list it earlier in the plan \
                     or run it beforehand"
                )));
            }
        }
        seen.push(stage);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Marker matched the current configuration; nothing was done.
    Skipped,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// Run one stage, honouring completion markers: a matching marker skips the
/// stage, a mismatching one is an error unless `force` wipes the stage
/// directory first.
pub fn run_stage(ctx: &StageCtx<'_>, stage: Stage) -> Result<StageOutcome, PipelineError> {
    // All prerequisites must be complete and current.
    for dep in stage.deps(ctx.cfg) {
        let marker = ctx.read_marker(dep)?.ok_or_else(|| {
            PipelineError::MissingPrerequisite {
                stage: stage.name().to_string(),
                artifact: format!("stages/{dep}/marker.json"),
            }
        })?;
        let expected = stage_hash(ctx, dep)?;
        if marker.config_hash != expected {
            return Err(PipelineError::StaleMarker {
                stage: dep.name().to_string(),
            });
        }
    }

    let expected = stage_hash(ctx, stage)?;
    if let Some(marker) = ctx.read_marker(stage)? {
        if marker.config_hash == expected {
            log::info!("stage {stage}: up to date, skipping");
            return Ok(StageOutcome::Skipped);
        }
        if !ctx.force {
            return Err(PipelineError::StaleMarker {
                stage: stage.name().to_string(),
            });
        }
        log::warn!("stage {stage}: marker mismatch, --force wipes and reruns");
        fs::remove_dir_all(ctx.stage_dir(stage))?;
    }

    fs::create_dir_all(ctx.outputs_dir(stage))?;
    log::info!("stage {stage}: running");
    let (outputs, note) = stages::execute(ctx, stage)?;

    let mut parents = BTreeMap::new();
    for dep in stage.deps(ctx.cfg) {
        parents.insert(dep.name().to_string(), stage_hash(ctx, dep)?);
    }
    let marker = Marker {
        stage: stage.name().to_string(),
        config_hash: expected,
        parents,
        completed_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        outputs,
        note,
    };
    ctx.write_marker(stage, &marker)?;
    Ok(StageOutcome::Ran)
}

/// Validate then run a stage list, collecting what ran and what was skipped.
pub fn run_plan(ctx: &StageCtx<'_>, plan: &[Stage]) -> Result<RunSummary, PipelineError> {
    validate_plan(ctx, plan)?;
    let mut summary = RunSummary::default();
    for &stage in plan {
        match run_stage(ctx, stage)? {
            StageOutcome::Ran => summary.executed.push(stage.name().to_string()),
            StageOutcome::Skipped => summary.skipped.push(stage.name().to_string()),
        }
    }
    Ok(summary)
}

/// The canonical full plan.
pub fn full_plan() -> Vec<Stage> {
    Stage::ALL.to_vec()
}
