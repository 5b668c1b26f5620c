//! Semi-supervised training support: pseudotranscribing untranscribed
//! audio with an internal decoder or an external command, filtering the
//! pseudolabels, and merging them with gold data for training.

use crate::corpus::{mix_manifests, CorpusError, Manifest, Role};
use crate::decode::{
    read_errors_tsv, read_hypotheses_tsv, transcribe_manifest, write_hypotheses_tsv, DecodeError,
    DecodeMode, HypRow, TranscribeSetup,
};
use crate::scalar::Scalar;
use rustfft::FftNum;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SstError {
    #[error("manifest role '{0}' is not an untranscribed split")]
    NotUntranscribed(Role),
    #[error("external transcriber exited with {status}; stderr: {stderr}")]
    ExternalCommand { status: String, stderr: String },
    #[error("duplicate hypothesis for utterance '{0}'")]
    DuplicateHypothesis(String),
    #[error("hypothesis for utterance '{0}' not in the manifest")]
    UnknownUtterance(String),
    #[error("bad transcriber or filter setup: {0}")]
    BadSetup(String),
    #[error("{count} utterance ids appear in both gold and pseudo data (label leakage), first: '{first}'")]
    LabelLeakage { count: usize, first: String },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How pseudotranscripts get produced.
pub enum Transcriber<'a, T: Scalar> {
    /// Encoder CTC output composed with a lexicon and word LM; the
    /// decoder half of the model is not consulted.
    InternalCtcLexLm(TranscribeSetup<'a, T>),
    /// Label-synchronous joint attention/CTC beam.
    InternalJoint(TranscribeSetup<'a, T>),
    /// Subprocess taking `{manifest}` and `{out}` placeholders; must
    /// write a hypothesis TSV to `{out}` and exit 0.
    ExternalCommand { template: String },
}

impl<'a, T: Scalar> Transcriber<'a, T> {
    pub fn validate(&self) -> Result<(), SstError> {
        match self {
            Transcriber::InternalCtcLexLm(setup) => {
                if setup.decode.mode != DecodeMode::CtcBeamLm {
                    return Err(SstError::BadSetup(format!(
                        "internal_ctc_lex_lm needs decode mode ctc_beam_lm, got {:?}",
                        setup.decode.mode
                    )));
                }
            }
            Transcriber::InternalJoint(setup) => {
                if setup.decode.mode != DecodeMode::JointAttention {
                    return Err(SstError::BadSetup(format!(
                        "internal_joint needs decode mode joint_attention, got {:?}",
                        setup.decode.mode
                    )));
                }
            }
            Transcriber::ExternalCommand { template } => {
                for placeholder in ["{manifest}", "{out}"] {
                    if !template.contains(placeholder) {
                        return Err(SstError::BadSetup(format!(
                            "external command template is missing {placeholder}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Short human-readable description recorded in provenance.
    pub fn description(&self) -> String {
        match self {
            Transcriber::InternalCtcLexLm(setup) => format!(
                "internal_ctc_lex_lm beam={} lm_weight={}",
                setup.decode.beam_size, setup.decode.lm_weight
            ),
            Transcriber::InternalJoint(setup) => format!(
                "internal_joint beam={} ctc_weight={}",
                setup.decode.beam_size, setup.decode.ctc_weight_decode
            ),
            Transcriber::ExternalCommand { template } => {
                format!("external_command: {template}")
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoProvenance {
    pub transcriber: String,
    pub created_unix: u64,
    pub config_hash: String,
}

/// Where the input utterances went: kept, or dropped by reason.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
}

impl FilterReport {
    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }

    pub fn accounts_for_input(&self) -> bool {
        self.kept + self.dropped_total() == self.input
    }
}

/// Machine transcripts for (a subset of) an untranscribed manifest.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    pub hyps: BTreeMap<String, HypRow>,
    /// Audio seconds per kept utterance, for rate-based filtering.
    pub durations: BTreeMap<String, f64>,
    pub provenance: PseudoProvenance,
    pub filter_report: FilterReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct PseudoSidecar {
    provenance: PseudoProvenance,
    filter_report: FilterReport,
    durations: BTreeMap<String, f64>,
}

fn sidecar_path(tsv_path: &Path) -> PathBuf {
    let mut s = tsv_path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

impl PseudoLabelSet {
    /// Persist as a hypothesis TSV plus a `<path>.json` sidecar.
    pub fn save(&self, tsv_path: &Path) -> Result<(), SstError> {
        let rows: Vec<HypRow> = self.hyps.values().cloned().collect();
        write_hypotheses_tsv(tsv_path, &rows)?;
        let sidecar = PseudoSidecar {
            provenance: self.provenance.clone(),
            filter_report: self.filter_report.clone(),
            durations: self.durations.clone(),
        };
        fs::write(
            sidecar_path(tsv_path),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )?;
        Ok(())
    }

    pub fn load(tsv_path: &Path) -> Result<Self, SstError> {
        let rows = read_hypotheses_tsv(tsv_path)?;
        let side = sidecar_path(tsv_path);
        let text = fs::read_to_string(&side)?;
        let sidecar: PseudoSidecar = serde_json::from_str(&text).map_err(|e| SstError::Format {
            path: side.display().to_string(),
            msg: e.to_string(),
        })?;
        let mut hyps = BTreeMap::new();
        for row in rows {
            let id = row.utt_id.clone();
            if hyps.insert(id.clone(), row).is_some() {
                return Err(SstError::DuplicateHypothesis(id));
            }
        }
        Ok(PseudoLabelSet {
            hyps,
            durations: sidecar.durations,
            provenance: sidecar.provenance,
            filter_report: sidecar.filter_report,
        })
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Transcribe every utterance of an untranscribed manifest. Utterances
/// the transcriber fails on are dropped with a reason; the external
/// command failing as a whole is an error.
pub fn pseudotranscribe<T: Scalar + FftNum>(
    untranscribed: &Manifest,
    transcriber: &Transcriber<'_, T>,
    audio_base: &Path,
    work_dir: &Path,
    config_hash: &str,
) -> Result<PseudoLabelSet, SstError> {
    transcriber.validate()?;
    match untranscribed.role {
        Role::UntranscribedCs | Role::UntranscribedBn => {}
        role => return Err(SstError::NotUntranscribed(role)),
    }
    fs::create_dir_all(work_dir)?;
    let hyp_path = work_dir.join("pseudo_hyps.tsv");
    let err_path = work_dir.join("pseudo_errors.tsv");

    let (rows, failures) = match transcriber {
        Transcriber::InternalCtcLexLm(setup) | Transcriber::InternalJoint(setup) => {
            transcribe_manifest(setup, untranscribed, audio_base, &hyp_path, &err_path)?;
            (read_hypotheses_tsv(&hyp_path)?, read_errors_tsv(&err_path)?)
        }
        Transcriber::ExternalCommand { template } => {
            let man_path = work_dir.join("pseudo_manifest.jsonl");
            untranscribed.write(&man_path)?;
            let cmd = template
                .replace("{manifest}", &man_path.display().to_string())
                .replace("{out}", &hyp_path.display().to_string());
            let output = Command::new("sh").arg("-c").arg(&cmd).output()?;
            if !output.status.success() {
                return Err(SstError::ExternalCommand {
                    status: output.status.to_string(),
                    stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
                });
            }
            (read_hypotheses_tsv(&hyp_path)?, Vec::new())
        }
    };

    let known: BTreeMap<&str, f64> = untranscribed
        .utterances
        .iter()
        .map(|u| (u.utt_id.as_str(), u.duration_s))
        .collect();
    let mut hyps: BTreeMap<String, HypRow> = BTreeMap::new();
    for row in rows {
        if !known.contains_key(row.utt_id.as_str()) {
            return Err(SstError::UnknownUtterance(row.utt_id));
        }
        let id = row.utt_id.clone();
        if hyps.insert(id.clone(), row).is_some() {
            return Err(SstError::DuplicateHypothesis(id));
        }
    }

    let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
    for failure in &failures {
        *dropped
            .entry(format!("decode_failure:{}", failure.class))
            .or_default() += 1;
    }
    let accounted = hyps.len() + failures.len();
    if accounted < known.len() {
        // External transcribers may silently omit utterances.
        dropped.insert("missing_output".to_string(), known.len() - accounted);
    }

    let durations: BTreeMap<String, f64> = hyps
        .keys()
        .map(|id| (id.clone(), known[id.as_str()]))
        .collect();
    Ok(PseudoLabelSet {
        filter_report: FilterReport {
            input: known.len(),
            kept: hyps.len(),
            dropped,
        },
        durations,
        provenance: PseudoProvenance {
            transcriber: transcriber.description(),
            created_unix: now_unix(),
            config_hash: config_hash.to_string(),
        },
        hyps,
    })
}

/// Near-vacuous safety rails by default: no stated filtering upstream,
/// so only empty text and absurd character rates are dropped.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    pub min_confidence: f64,
    pub drop_empty: bool,
    pub max_char_per_second: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_confidence: 0.0,
            drop_empty: true,
            max_char_per_second: 40.0,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), SstError> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(SstError::BadSetup(format!(
                "min_confidence {} outside [0, 1]",
                self.min_confidence
            )));
        }
        if !(self.max_char_per_second > 0.0) {
            return Err(SstError::BadSetup(format!(
                "max_char_per_second {} must be positive",
                self.max_char_per_second
            )));
        }
        Ok(())
    }
}

/// Drop entries failing the policy. The output is a subset of the
/// input, and the report keeps accounting for the original manifest.
pub fn filter_pseudolabels(
    set: &PseudoLabelSet,
    policy: &FilterPolicy,
) -> Result<PseudoLabelSet, SstError> {
    policy.validate()?;
    let mut kept: BTreeMap<String, HypRow> = BTreeMap::new();
    let mut dropped = set.filter_report.dropped.clone();
    let drop = |reason: &str, map: &mut BTreeMap<String, usize>| {
        *map.entry(reason.to_string()).or_default() += 1;
    };
    for (id, row) in &set.hyps {
        if policy.drop_empty && row.text.trim().is_empty() {
            drop("empty", &mut dropped);
        } else if row.confidence < policy.min_confidence {
            drop("low_confidence", &mut dropped);
        } else {
            let chars = row.text.chars().count() as f64;
            let seconds = set.durations.get(id).copied().unwrap_or(0.0);
            if chars > policy.max_char_per_second * seconds {
                drop("char_rate", &mut dropped);
            } else {
                kept.insert(id.clone(), row.clone());
            }
        }
    }
    let durations: BTreeMap<String, f64> = set
        .durations
        .iter()
        .filter(|(id, _)| kept.contains_key(*id))
        .map(|(id, d)| (id.clone(), *d))
        .collect();
    Ok(PseudoLabelSet {
        filter_report: FilterReport {
            input: set.filter_report.input,
            kept: kept.len(),
            dropped,
        },
        hyps: kept,
        durations,
        provenance: set.provenance.clone(),
    })
}

/// Gold and pseudo data merged for training, with the pseudo ids kept
/// aside so their loss contributions can be tagged.
#[derive(Debug, Clone)]
pub struct SstMixture {
    pub manifest: Manifest,
    pub pseudo_ids: BTreeSet<String>,
}

/// Build the gold + pseudo training pool. `source` is the untranscribed
/// manifest the pseudo set was decoded from; its utterances gain the
/// hypothesis text. Gold utterance ids must be disjoint from the pseudo
/// set so machine output can never be confused with gold supervision.
pub fn merge_for_sst(
    gold: &[(Manifest, f64)],
    source: &Manifest,
    pseudo: &PseudoLabelSet,
    pseudo_weight: f64,
) -> Result<SstMixture, SstError> {
    let mut leaked: Vec<&String> = Vec::new();
    for (manifest, _) in gold {
        for utt in &manifest.utterances {
            if pseudo.hyps.contains_key(&utt.utt_id) {
                leaked.push(&utt.utt_id);
            }
        }
    }
    if let Some(first) = leaked.first() {
        return Err(SstError::LabelLeakage {
            count: leaked.len(),
            first: (*first).clone(),
        });
    }

    let mut pseudo_manifest = Manifest::new(Role::Mixed);
    for utt in &source.utterances {
        if let Some(row) = pseudo.hyps.get(&utt.utt_id) {
            let mut u = utt.clone();
            u.text = Some(row.text.clone());
            pseudo_manifest.utterances.push(u);
        }
    }

    let mut parts: Vec<(Manifest, f64)> = gold.to_vec();
    let pseudo_ids: BTreeSet<String> = pseudo_manifest
        .utterances
        .iter()
        .map(|u| u.utt_id.clone())
        .collect();
    if !pseudo_manifest.utterances.is_empty() {
        parts.push((pseudo_manifest, pseudo_weight));
    }
    let manifest = mix_manifests(&parts)?;
    Ok(SstMixture {
        manifest,
        pseudo_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, Utterance};

    fn utt(id: &str, text: Option<&str>, dur: f64) -> Utterance {
        Utterance {
            utt_id: id.to_string(),
            audio: format!("{id}.wav"),
            duration_s: dur,
            speaker: "spk0".to_string(),
            domain: Domain::Cs,
            text: text.map(str::to_string),
            sample_rate: 16_000,
            weight: 1.0,
        }
    }

    fn untranscribed(ids: &[&str]) -> Manifest {
        let mut m = Manifest::new(Role::UntranscribedCs);
        m.utterances = ids.iter().map(|id| utt(id, None, 2.0)).collect();
        m
    }

    fn hyp(id: &str, text: &str, conf: f64) -> HypRow {
        HypRow {
            utt_id: id.to_string(),
            text: text.to_string(),
            confidence: conf,
            score_total: -1.0,
        }
    }

    fn set_of(rows: Vec<HypRow>, dur: f64) -> PseudoLabelSet {
        let hyps: BTreeMap<String, HypRow> =
            rows.into_iter().map(|r| (r.utt_id.clone(), r)).collect();
        let durations = hyps.keys().map(|id| (id.clone(), dur)).collect();
        PseudoLabelSet {
            filter_report: FilterReport {
                input: hyps.len(),
                kept: hyps.len(),
                dropped: BTreeMap::new(),
            },
            durations,
            provenance: PseudoProvenance {
                transcriber: "test".to_string(),
                created_unix: 0,
                config_hash: "hash".to_string(),
            },
            hyps,
        }
    }

    type F64Transcriber<'a> = Transcriber<'a, f64>;

    #[test]
    fn external_template_needs_both_placeholders() {
        let t = F64Transcriber::ExternalCommand {
            template: "transcribe {manifest}".to_string(),
        };
        assert!(matches!(t.validate(), Err(SstError::BadSetup(_))));
        let ok = F64Transcriber::ExternalCommand {
            template: "transcribe {manifest} > {out}".to_string(),
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn oracle_external_command_round_trips_gold() {
        // A command that "knows" the answers writes them verbatim; the
        // pseudo set must come back intact with WER-zero texts.
        let dir = tempfile::tempdir().unwrap();
        let manifest = untranscribed(&["u1", "u2"]);
        let answers = dir.path().join("answers.tsv");
        fs::write(
            &answers,
            "utt_id\ttext\tconfidence\tscore_total\nu1\tab ba\t1\t0\nu2\tba\t1\t0\n",
        )
        .unwrap();
        let t = F64Transcriber::ExternalCommand {
            template: format!("test -f {{manifest}} && cp {} {{out}}", answers.display()),
        };
        let set =
            pseudotranscribe(&manifest, &t, dir.path(), &dir.path().join("work"), "h").unwrap();
        assert_eq!(set.hyps.len(), 2);
        assert_eq!(set.hyps["u1"].text, "ab ba");
        assert_eq!(set.filter_report.kept, 2);
        assert!(set.filter_report.accounts_for_input());
        assert_eq!(set.durations["u2"], 2.0);
        assert!(set.provenance.transcriber.starts_with("external_command"));
    }

    #[test]
    fn external_command_failure_reports_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = untranscribed(&["u1"]);
        let t = F64Transcriber::ExternalCommand {
            template: "ls {manifest} {out} >/dev/null; echo boom >&2; exit 3".to_string(),
        };
        match pseudotranscribe(&manifest, &t, dir.path(), &dir.path().join("w"), "h") {
            Err(SstError::ExternalCommand { stderr, .. }) => {
                assert!(stderr.contains("boom"), "stderr: {stderr}")
            }
            other => panic!("expected command failure, got {other:?}"),
        }
    }

    #[test]
    fn malformed_external_tsv_names_first_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = untranscribed(&["u1"]);
        let t = F64Transcriber::ExternalCommand {
            template: "printf 'utt_id\\ttext\\tconfidence\\tscore_total\\nu1\\tonly two\\n' > {out} # {manifest}"
                .to_string(),
        };
        match pseudotranscribe(&manifest, &t, dir.path(), &dir.path().join("w"), "h") {
            Err(SstError::Decode(DecodeError::Format { line, .. })) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn omitted_utterances_counted_as_missing() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = untranscribed(&["u1", "u2", "u3"]);
        let t = F64Transcriber::ExternalCommand {
            template:
                "printf 'utt_id\\ttext\\tconfidence\\tscore_total\\nu2\\tab\\t0.9\\t-1\\n' > {out} # {manifest}"
                    .to_string(),
        };
        let set =
            pseudotranscribe(&manifest, &t, dir.path(), &dir.path().join("w"), "h").unwrap();
        assert_eq!(set.filter_report.kept, 1);
        assert_eq!(set.filter_report.dropped["missing_output"], 2);
        assert!(set.filter_report.accounts_for_input());
    }

    #[test]
    fn unknown_utterance_in_output_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = untranscribed(&["u1"]);
        let t = F64Transcriber::ExternalCommand {
            template:
                "printf 'utt_id\\ttext\\tconfidence\\tscore_total\\nu9\\tab\\t0.9\\t-1\\n' > {out} # {manifest}"
                    .to_string(),
        };
        match pseudotranscribe(&manifest, &t, dir.path(), &dir.path().join("w"), "h") {
            Err(SstError::UnknownUtterance(id)) => assert_eq!(id, "u9"),
            other => panic!("expected unknown-utterance error, got {other:?}"),
        }
    }

    #[test]
    fn transcribed_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = untranscribed(&["u1"]);
        manifest.role = Role::TranscribedCs;
        let t = F64Transcriber::ExternalCommand {
            template: "true {manifest} {out}".to_string(),
        };
        assert!(matches!(
            pseudotranscribe(&manifest, &t, dir.path(), &dir.path().join("w"), "h"),
            Err(SstError::NotUntranscribed(Role::TranscribedCs))
        ));
    }

    #[test]
    fn vacuous_policy_is_identity() {
        let set = set_of(
            vec![hyp("u1", "ab", 0.2), hyp("u2", "", 0.9)],
            2.0,
        );
        let policy = FilterPolicy {
            min_confidence: 0.0,
            drop_empty: false,
            max_char_per_second: f64::INFINITY,
        };
        let out = filter_pseudolabels(&set, &policy).unwrap();
        assert_eq!(out.hyps, set.hyps);
        assert_eq!(out.filter_report.kept, 2);
        assert!(out.filter_report.dropped.is_empty());
    }

    #[test]
    fn empty_text_dropped_with_reason() {
        let set = set_of(vec![hyp("u1", "  ", 0.9), hyp("u2", "ab", 0.9)], 2.0);
        let out = filter_pseudolabels(&set, &FilterPolicy::default()).unwrap();
        assert_eq!(out.filter_report.dropped["empty"], 1);
        assert!(out.hyps.contains_key("u2") && !out.hyps.contains_key("u1"));
        assert!(out.filter_report.accounts_for_input());
    }

    #[test]
    fn confidence_threshold_matches_direct_recount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let rows: Vec<HypRow> = (0..100)
            .map(|i| hyp(&format!("u{i:03}"), "ab", rng.gen_range(0.0..1.0)))
            .collect();
        let expected = rows.iter().filter(|r| r.confidence >= 0.5).count();
        let set = set_of(rows, 2.0);
        let policy = FilterPolicy {
            min_confidence: 0.5,
            drop_empty: false,
            max_char_per_second: f64::INFINITY,
        };
        let out = filter_pseudolabels(&set, &policy).unwrap();
        assert_eq!(out.hyps.len(), expected);
        assert_eq!(out.filter_report.dropped["low_confidence"], 100 - expected);
        assert!(out.filter_report.accounts_for_input());
    }

    #[test]
    fn char_rate_filter_drops_fast_text() {
        // 100 chars in 2 s = 50 chars/s, above the default 40 cap.
        let fast = "a".repeat(100);
        let set = set_of(vec![hyp("u1", &fast, 0.9), hyp("u2", "ab ba", 0.9)], 2.0);
        let out = filter_pseudolabels(&set, &FilterPolicy::default()).unwrap();
        assert_eq!(out.filter_report.dropped["char_rate"], 1);
        assert!(out.hyps.contains_key("u2"));
    }

    #[test]
    fn filter_output_is_subset_and_accounted() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(12);
        let rows: Vec<HypRow> = (0..50)
            .map(|i| {
                let text = if rng.gen_bool(0.2) {
                    String::new()
                } else {
                    "ab".repeat(rng.gen_range(1..60))
                };
                hyp(&format!("u{i:03}"), &text, rng.gen_range(0.0..1.0))
            })
            .collect();
        let set = set_of(rows, 2.0);
        let policy = FilterPolicy {
            min_confidence: 0.3,
            ..FilterPolicy::default()
        };
        let out = filter_pseudolabels(&set, &policy).unwrap();
        assert!(out.hyps.keys().all(|id| set.hyps.contains_key(id)));
        assert!(out
            .hyps
            .iter()
            .all(|(id, row)| set.hyps[id] == *row));
        assert!(out.filter_report.accounts_for_input());
        assert_eq!(out.filter_report.input, 50);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = set_of(vec![hyp("u1", "ab", 0.75), hyp("u2", "ba ab", 0.5)], 2.0);
        let path = dir.path().join("pseudo.tsv");
        set.save(&path).unwrap();
        let back = PseudoLabelSet::load(&path).unwrap();
        assert_eq!(back.hyps, set.hyps);
        assert_eq!(back.durations, set.durations);
        assert_eq!(back.provenance, set.provenance);
        assert_eq!(back.filter_report, set.filter_report);
    }

    #[test]
    fn merge_tags_pseudo_and_weights_gold() {
        let mut gold = Manifest::new(Role::TranscribedCs);
        gold.utterances = vec![utt("g1", Some("ab"), 2.0)];
        let source = untranscribed(&["p1", "p2"]);
        let pseudo = set_of(vec![hyp("p1", "ba", 0.9)], 2.0);
        let mix = merge_for_sst(&[(gold, 1.0)], &source, &pseudo, 0.5).unwrap();
        assert_eq!(mix.manifest.utterances.len(), 2);
        assert!(mix.pseudo_ids.contains("p1") && !mix.pseudo_ids.contains("g1"));
        let by_id: BTreeMap<&str, &Utterance> = mix
            .manifest
            .utterances
            .iter()
            .map(|u| (u.utt_id.as_str(), u))
            .collect();
        assert_eq!(by_id["p1"].text.as_deref(), Some("ba"));
        assert!((by_id["p1"].weight - 0.5).abs() < 1e-12);
        assert!((by_id["g1"].weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gold_pseudo_overlap_is_leakage() {
        let mut gold = Manifest::new(Role::TranscribedCs);
        gold.utterances = vec![utt("x1", Some("ab"), 2.0)];
        let source = untranscribed(&["x1"]);
        let pseudo = set_of(vec![hyp("x1", "ba", 0.9)], 2.0);
        match merge_for_sst(&[(gold, 1.0)], &source, &pseudo, 1.0) {
            Err(SstError::LabelLeakage { count, first }) => {
                assert_eq!(count, 1);
                assert_eq!(first, "x1");
            }
            other => panic!("expected leakage error, got {other:?}"),
        }
    }

    #[test]
    fn empty_pseudo_set_merges_to_gold_only() {
        let mut gold = Manifest::new(Role::TranscribedCs);
        gold.utterances = vec![utt("g1", Some("ab"), 2.0)];
        let source = untranscribed(&["p1"]);
        let pseudo = set_of(vec![], 2.0);
        let mix = merge_for_sst(&[(gold.clone(), 1.0)], &source, &pseudo, 1.0).unwrap();
        assert_eq!(mix.manifest.utterances.len(), 1);
        assert!(mix.pseudo_ids.is_empty());
        assert_eq!(mix.manifest.utterances[0].utt_id, "g1");
    }
}
