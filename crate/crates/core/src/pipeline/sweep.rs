//! Supervision sweeps: run the same plan under several supervision settings,
//! sharing identically-configured completed stages through a content-addressed
//! cache so, for example, two conditions that resolve to the same supervised
//! subset never train the same baseline twice.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::SubsetStrategy;
use crate::eval::ScoreReport;

use super::{
    run_stage, stage_hash, validate_plan, PipelineConfig, PipelineError, Stage, StageCtx,
    StageOutcome,
};

/// One sweep condition: a label and the overrides that distinguish it from
/// the base configuration.
#[derive(Debug, Clone)]
pub struct SweepCondition {
    pub label: String,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub label: String,
    pub supervised_hours: Option<f64>,
    pub strategy: String,
    /// Word error rate per scored checkpoint stage.
    pub wers: BTreeMap<String, f64>,
    pub executed: usize,
    pub skipped: usize,
    /// First failure, if the condition did not finish.
    pub error: Option<String>,
}

fn strategy_name(s: SubsetStrategy) -> &'static str {
    match s {
        SubsetStrategy::RandomUtterance => "random_utterance",
        SubsetStrategy::BySpeaker => "by_speaker",
    }
}

fn is_symlink(path: &Path) -> bool {
    path.symlink_metadata()
        .map(|m| m.file_type().is_symlink())
        .unwrap_or(false)
}

/// Stages worth caching: everything that trains or transforms data. The
/// evaluation stage is cheap and writes outside its stage directory, so it
/// always runs in place.
fn cacheable(stage: Stage) -> bool {
    stage != Stage::Evaluate
}

fn cache_dir(root: &Path, stage: Stage, hash: &str) -> PathBuf {
    root.join("cache").join(format!("{stage}_{}", &hash[..16]))
}

/// Link `stage_dir` to the cache entry when one exists and the condition has
/// not materialized the stage yet.
fn adopt_cached(
    root: &Path,
    ctx: &StageCtx<'_>,
    stage: Stage,
    hash: &str,
) -> Result<(), PipelineError> {
    let sdir = ctx.stage_dir(stage);
    if sdir.exists() {
        return Ok(());
    }
    let cache = cache_dir(root, stage, hash);
    if !cache.exists() {
        return Ok(());
    }
    if let Some(parent) = sdir.parent() {
        fs::create_dir_all(parent)?;
    }
    let target = cache.canonicalize()?;
    std::os::unix::fs::symlink(&target, &sdir)?;
    Ok(())
}

/// Move a freshly completed stage into the cache and symlink it back.
fn promote_to_cache(
    root: &Path,
    ctx: &StageCtx<'_>,
    stage: Stage,
    hash: &str,
) -> Result<(), PipelineError> {
    let sdir = ctx.stage_dir(stage);
    if !sdir.exists() || is_symlink(&sdir) {
        return Ok(());
    }
    let cache = cache_dir(root, stage, hash);
    if cache.exists() {
        // Another condition got there first; keep the local copy.
        return Ok(());
    }
    if let Some(parent) = cache.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::rename(&sdir, &cache)?;
    let target = cache.canonicalize()?;
    std::os::unix::fs::symlink(&target, &sdir)?;
    Ok(())
}

fn collect_wers(exp_dir: &Path) -> (BTreeMap<String, f64>, Option<f64>) {
    let mut wers = BTreeMap::new();
    let mut hours = None;
    for stage in [
        Stage::BaselineSupervised,
        Stage::Finetune,
        Stage::SstTrain,
        Stage::FinalFinetune,
    ] {
        let path = exp_dir.join("reports").join(format!("{stage}.wer.json"));
        if let Ok(report) = ScoreReport::read_json(&path) {
            wers.insert(stage.name().to_string(), report.error_rate);
            if let Some(meta) = report.condition {
                hours = Some(meta.supervised_hours);
            }
        }
    }
    (wers, hours)
}

/// Run `plan` once per condition under `root/conditions/<label>`, sharing
/// completed stages through `root/cache`. A failing condition is recorded
/// and does not stop the others. A summary table lands in
/// `root/reports/sweep.tsv`.
pub fn sweep_supervision(
    config_path: Option<&Path>,
    base_overrides: &[String],
    conditions: &[SweepCondition],
    root: &Path,
    plan: &[Stage],
    force: bool,
) -> Result<Vec<SweepOutcome>, PipelineError> {
    if conditions.is_empty() {
        return Err(PipelineError::Config("no sweep conditions given".to_string()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in conditions {
        if c.label.is_empty() || c.label.contains(['/', '\\']) {
            return Err(PipelineError::Config(format!(
                "bad sweep label '{}'",
                c.label
            )));
        }
        if !seen.insert(&c.label) {
            return Err(PipelineError::Config(format!(
                "sweep label '{}' appears twice",
                c.label
            )));
        }
    }
    fs::create_dir_all(root)?;

    let mut outcomes = Vec::new();
    for cond in conditions {
        log::info!("sweep condition '{}'", cond.label);
        let mut overrides = base_overrides.to_vec();
        overrides.extend(cond.overrides.iter().cloned());
        let outcome = run_condition(config_path, &overrides, cond, root, plan, force);
        outcomes.push(match outcome {
            Ok(o) => o,
            Err(e) => {
                log::error!("sweep condition '{}' failed: {e}", cond.label);
                SweepOutcome {
                    label: cond.label.clone(),
                    supervised_hours: None,
                    strategy: String::new(),
                    wers: BTreeMap::new(),
                    executed: 0,
                    skipped: 0,
                    error: Some(e.to_string()),
                }
            }
        });
    }

    let reports = root.join("reports");
    fs::create_dir_all(&reports)?;
    let mut table = fs::File::create(reports.join("sweep.tsv"))?;
    writeln!(
        table,
        "label\tsupervised_hours\tstrategy\tbaseline_wer\tfinetune_wer\tsst_wer\tfinal_wer\terror"
    )?;
    for o in &outcomes {
        let cell = |stage: &str| {
            o.wers
                .get(stage)
                .map_or("-".to_string(), |w| format!("{w:.2}"))
        };
        writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            o.label,
            o.supervised_hours
                .map_or("-".to_string(), |h| format!("{h:.4}")),
            if o.strategy.is_empty() { "-" } else { &o.strategy },
            cell("baseline_supervised"),
            cell("finetune"),
            cell("sst_train"),
            cell("final_finetune"),
            o.error.as_deref().unwrap_or("-"),
        )?;
    }
    table.flush()?;
    Ok(outcomes)
}

fn run_condition(
    config_path: Option<&Path>,
    overrides: &[String],
    cond: &SweepCondition,
    root: &Path,
    plan: &[Stage],
    force: bool,
) -> Result<SweepOutcome, PipelineError> {
    let mut cfg = PipelineConfig::load(config_path, overrides)?;
    // Conditions share one corpus; resolve a relative path against the sweep
    // root rather than each condition directory.
    if !cfg.shared.corpus_dir.is_absolute() {
        cfg.shared.corpus_dir = root.join(&cfg.shared.corpus_dir);
    }
    let exp_dir = root.join("conditions").join(&cond.label);
    fs::create_dir_all(&exp_dir)?;
    let ctx = StageCtx::new(&cfg, &exp_dir, force);
    validate_plan(&ctx, plan)?;

    let mut executed = 0;
    let mut skipped = 0;
    for &stage in plan {
        let hash = if cacheable(stage) {
            let h = stage_hash(&ctx, stage)?;
            adopt_cached(root, &ctx, stage, &h)?;
            Some(h)
        } else {
            None
        };
        match run_stage(&ctx, stage)? {
            StageOutcome::Ran => executed += 1,
            StageOutcome::Skipped => skipped += 1,
        }
        if let Some(h) = hash {
            promote_to_cache(root, &ctx, stage, &h)?;
        }
    }

    let (wers, hours) = collect_wers(&exp_dir);
    Ok(SweepOutcome {
        label: cond.label.clone(),
        supervised_hours: hours,
        strategy: strategy_name(cfg.shared.subset_strategy).to_string(),
        wers,
        executed,
        skipped,
        error: None,
    })
}
