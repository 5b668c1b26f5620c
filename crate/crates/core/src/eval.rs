//! Scoring: exact edit-distance WER/CER with pooled-count aggregation,
//! per-utterance alignment reports, and condition-comparison tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference and hypothesis key sets differ (missing from hyps: {missing:?}; extra in hyps: {extra:?})")]
    KeyMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("reference set is empty")]
    EmptyReference,
    #[error("baseline condition '{0}' not among the reports")]
    BaselineMissing(String),
    #[error("need at least 2 reports to compare, got {0}")]
    NotEnoughReports(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringUnit {
    Words,
    Characters,
}

/// One aligned step between reference and hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignOp {
    Hit,
    Substitute,
    Delete,
    Insert,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub hits: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(&mut self, other: &EditCounts) {
        self.hits += other.hits;
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UttAlignment {
    pub utt_id: String,
    pub ref_tokens: Vec<String>,
    pub hyp_tokens: Vec<String>,
    pub ops: Vec<AlignOp>,
    pub counts: EditCounts,
}

/// Free-form experiment metadata carried through to reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionMeta {
    pub label: String,
    pub supervised_hours: f64,
    pub stages: Vec<String>,
}

/// Pooled scoring result: counts are summed over utterances before the
/// rate is computed (never a mean of per-utterance rates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub unit: ScoringUnit,
    /// 100 · (S + D + I) / reference tokens; may exceed 100.
    pub error_rate: f64,
    pub counts: EditCounts,
    pub ref_tokens: usize,
    pub utterances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<ConditionMeta>,
    #[serde(skip)]
    pub alignments: Vec<UttAlignment>,
}

impl ScoreReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(
            path,
            serde_json::to_string_pretty(self).expect("report serializes"),
        )?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            EvalError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
    }

    /// Human-readable per-utterance alignment, `***` marking the side
    /// an edit removed.
    pub fn alignment_text(&self) -> String {
        let mut out = String::new();
        for utt in &self.alignments {
            let c = &utt.counts;
            let _ = writeln!(
                out,
                "== {} (S={} D={} I={})",
                utt.utt_id, c.substitutions, c.deletions, c.insertions
            );
            let mut ref_row: Vec<String> = Vec::new();
            let mut hyp_row: Vec<String> = Vec::new();
            let (mut i, mut j) = (0usize, 0usize);
            for op in &utt.ops {
                let (r, h) = match op {
                    AlignOp::Hit | AlignOp::Substitute => {
                        let pair = (utt.ref_tokens[i].clone(), utt.hyp_tokens[j].clone());
                        i += 1;
                        j += 1;
                        pair
                    }
                    AlignOp::Delete => {
                        let pair = (utt.ref_tokens[i].clone(), "***".to_string());
                        i += 1;
                        pair
                    }
                    AlignOp::Insert => {
                        let pair = ("***".to_string(), utt.hyp_tokens[j].clone());
                        j += 1;
                        pair
                    }
                };
                let width = r.chars().count().max(h.chars().count());
                ref_row.push(format!("{r:width$}"));
                hyp_row.push(format!("{h:width$}"));
            }
            let _ = writeln!(out, "REF: {}", ref_row.join(" ").trim_end());
            let _ = writeln!(out, "HYP: {}", hyp_row.join(" ").trim_end());
        }
        out
    }

    pub fn write_alignment_text(&self, path: &Path) -> Result<(), EvalError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.alignment_text())?;
        Ok(())
    }
}

/// Levenshtein alignment with unit costs. Cost ties prefer substitution
/// over insertion over deletion: among minimum-cost alignments we take
/// one with the most substitutions. Any optimal alignment satisfies
/// S = n + m - 2·hits - cost, so fixing the substitution count this way
/// also fixes hits, deletions, and insertions — and makes the reported
/// counts identical (with D and I swapped) when the arguments swap.
pub fn align(ref_tokens: &[String], hyp_tokens: &[String]) -> (Vec<AlignOp>, EditCounts) {
    let n = ref_tokens.len();
    let m = hyp_tokens.len();
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    let mut dist = vec![0usize; (n + 1) * (m + 1)];
    let mut subs = vec![0usize; (n + 1) * (m + 1)];
    for i in 0..=n {
        dist[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dist[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(ref_tokens[i - 1] != hyp_tokens[j - 1]);
            let diag = dist[idx(i - 1, j - 1)] + sub_cost;
            let ins = dist[idx(i, j - 1)] + 1;
            let del = dist[idx(i - 1, j)] + 1;
            let here = diag.min(ins).min(del);
            dist[idx(i, j)] = here;
            let mut best = 0usize;
            if diag == here {
                best = best.max(subs[idx(i - 1, j - 1)] + sub_cost);
            }
            if ins == here {
                best = best.max(subs[idx(i, j - 1)]);
            }
            if del == here {
                best = best.max(subs[idx(i - 1, j)]);
            }
            subs[idx(i, j)] = best;
        }
    }

    let mut ops_rev = Vec::new();
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[idx(i, j)];
        let want = subs[idx(i, j)];
        let diag_ok = i > 0 && j > 0 && {
            let sub_cost = usize::from(ref_tokens[i - 1] != hyp_tokens[j - 1]);
            dist[idx(i - 1, j - 1)] + sub_cost == here
                && subs[idx(i - 1, j - 1)] + sub_cost == want
        };
        if diag_ok {
            if ref_tokens[i - 1] == hyp_tokens[j - 1] {
                ops_rev.push(AlignOp::Hit);
                counts.hits += 1;
            } else {
                ops_rev.push(AlignOp::Substitute);
                counts.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if j > 0 && dist[idx(i, j - 1)] + 1 == here && subs[idx(i, j - 1)] == want {
            ops_rev.push(AlignOp::Insert);
            counts.insertions += 1;
            j -= 1;
        } else {
            ops_rev.push(AlignOp::Delete);
            counts.deletions += 1;
            i -= 1;
        }
    }
    ops_rev.reverse();
    (ops_rev, counts)
}

pub fn word_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_string()).collect()
}

pub fn char_tokens(text: &str, include_spaces: bool) -> Vec<String> {
    text.chars()
        .filter(|c| include_spaces || *c != ' ')
        .map(|c| c.to_string())
        .collect()
}

fn score_with<F>(
    refs: &BTreeMap<String, String>,
    hyps: &BTreeMap<String, String>,
    unit: ScoringUnit,
    tokenize: F,
) -> Result<ScoreReport, EvalError>
where
    F: Fn(&str) -> Vec<String> + Sync,
{
    if refs.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let missing: Vec<String> = refs.keys().filter(|k| !hyps.contains_key(*k)).cloned().collect();
    let extra: Vec<String> = hyps.keys().filter(|k| !refs.contains_key(*k)).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(EvalError::KeyMismatch { missing, extra });
    }

    let pairs: Vec<(&String, &String, &String)> = refs
        .iter()
        .map(|(id, r)| (id, r, &hyps[id]))
        .collect();
    let alignments: Vec<UttAlignment> = pairs
        .par_iter()
        .map(|(id, r, h)| {
            let ref_tokens = tokenize(r);
            let hyp_tokens = tokenize(h);
            let (ops, counts) = align(&ref_tokens, &hyp_tokens);
            UttAlignment {
                utt_id: (*id).clone(),
                ref_tokens,
                hyp_tokens,
                ops,
                counts,
            }
        })
        .collect();

    let mut counts = EditCounts::default();
    let mut ref_tokens = 0usize;
    for utt in &alignments {
        counts.add(&utt.counts);
        ref_tokens += utt.ref_tokens.len();
    }
    let error_rate = 100.0 * counts.errors() as f64 / ref_tokens.max(1) as f64;
    Ok(ScoreReport {
        unit,
        error_rate,
        counts,
        ref_tokens,
        utterances: alignments.len(),
        condition: None,
        alignments,
    })
}

/// Word error rate over matching keyed transcript sets, pooled counts.
pub fn word_error_rate(
    refs: &BTreeMap<String, String>,
    hyps: &BTreeMap<String, String>,
) -> Result<ScoreReport, EvalError> {
    score_with(refs, hyps, ScoringUnit::Words, word_tokens)
}

/// Character error rate; spaces count as tokens when `include_spaces`.
pub fn character_error_rate_with(
    refs: &BTreeMap<String, String>,
    hyps: &BTreeMap<String, String>,
    include_spaces: bool,
) -> Result<ScoreReport, EvalError> {
    score_with(refs, hyps, ScoringUnit::Characters, |t| {
        char_tokens(t, include_spaces)
    })
}

pub fn character_error_rate(
    refs: &BTreeMap<String, String>,
    hyps: &BTreeMap<String, String>,
) -> Result<ScoreReport, EvalError> {
    character_error_rate_with(refs, hyps, true)
}

/// TSV grid of condition × error rate with deltas against a named
/// baseline condition.
pub fn compare_conditions(
    reports: &[(String, ScoreReport)],
    baseline: &str,
) -> Result<String, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::NotEnoughReports(reports.len()));
    }
    let base = reports
        .iter()
        .find(|(label, _)| label == baseline)
        .ok_or_else(|| EvalError::BaselineMissing(baseline.to_string()))?
        .1
        .error_rate;
    let mut out = format!("condition\terror_rate\tdelta_vs_{baseline}\n");
    for (label, report) in reports {
        let _ = writeln!(
            out,
            "{label}\t{:.2}\t{:+.2}",
            report.error_rate,
            report.error_rate - base
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn keyed(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    /// Independent distance-only DP, written without reference to the
    /// aligner above.
    fn oracle_distance(a: &[String], b: &[String]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for i in 1..=a.len() {
            let mut cur = vec![i];
            for j in 1..=b.len() {
                let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
                cur.push(sub.min(prev[j] + 1).min(cur[j - 1] + 1));
            }
            prev = cur;
        }
        prev[b.len()]
    }

    fn rand_tokens(rng: &mut ChaCha20Rng, max_len: usize, alphabet: usize) -> Vec<String> {
        let len = rng.gen_range(0..=max_len);
        (0..len)
            .map(|_| {
                char::from(b'a' + rng.gen_range(0..alphabet as u8)).to_string()
            })
            .collect()
    }

    #[test]
    fn worked_wer_examples() {
        let identical = word_error_rate(&keyed(&[("u", "x y")]), &keyed(&[("u", "x y")])).unwrap();
        assert_eq!(identical.error_rate, 0.0);

        let sub = word_error_rate(&keyed(&[("u", "a b c")]), &keyed(&[("u", "a x c")])).unwrap();
        assert_eq!(sub.counts.substitutions, 1);
        assert_eq!(sub.counts.deletions + sub.counts.insertions, 0);
        assert!((sub.error_rate - 100.0 / 3.0).abs() < 1e-9);

        let del = word_error_rate(&keyed(&[("u", "a b")]), &keyed(&[("u", "")])).unwrap();
        assert_eq!(del.counts.deletions, 2);
        assert_eq!(del.error_rate, 100.0);
    }

    #[test]
    fn worked_cer_examples() {
        let identical = character_error_rate(&keyed(&[("u", "ab")]), &keyed(&[("u", "ab")])).unwrap();
        assert_eq!(identical.error_rate, 0.0);

        let half = character_error_rate(&keyed(&[("u", "ab")]), &keyed(&[("u", "ac")])).unwrap();
        assert_eq!(half.error_rate, 50.0);

        let double = character_error_rate(&keyed(&[("u", "a")]), &keyed(&[("u", "abc")])).unwrap();
        assert_eq!(double.counts.insertions, 2);
        assert_eq!(double.error_rate, 200.0);
    }

    #[test]
    fn matches_independent_dp_on_random_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for case in 0..1000 {
            let a = rand_tokens(&mut rng, 12, 4);
            let b = rand_tokens(&mut rng, 12, 4);
            let (_, counts) = align(&a, &b);
            assert_eq!(
                counts.errors(),
                oracle_distance(&a, &b),
                "case {case}: {a:?} vs {b:?}"
            );
            assert_eq!(counts.hits + counts.substitutions + counts.deletions, a.len());
            assert_eq!(counts.hits + counts.substitutions + counts.insertions, b.len());
        }
    }

    #[test]
    fn distance_is_symmetric_with_swapped_edits() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..100 {
            let a = rand_tokens(&mut rng, 10, 3);
            let b = rand_tokens(&mut rng, 10, 3);
            let (_, fwd) = align(&a, &b);
            let (_, rev) = align(&b, &a);
            assert_eq!(fwd.errors(), rev.errors());
            assert_eq!(fwd.substitutions, rev.substitutions);
            assert_eq!(fwd.deletions, rev.insertions);
            assert_eq!(fwd.insertions, rev.deletions);
        }
    }

    #[test]
    fn triangle_inequality_holds() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = rand_tokens(&mut rng, 8, 3);
            let b = rand_tokens(&mut rng, 8, 3);
            let c = rand_tokens(&mut rng, 8, 3);
            let ab = align(&a, &b).1.errors();
            let bc = align(&b, &c).1.errors();
            let ac = align(&a, &c).1.errors();
            assert!(ac <= ab + bc);
        }
    }

    #[test]
    fn cost_ties_prefer_substitution() {
        // "ab" vs "ba" costs 2 either as two substitutions or as one
        // deletion plus one insertion; the tie-break picks substitutions.
        let a = word_tokens("a b");
        let b = word_tokens("b a");
        let (ops, counts) = align(&a, &b);
        assert_eq!(counts.substitutions, 2);
        assert_eq!(counts.deletions + counts.insertions, 0);
        assert_eq!(ops, vec![AlignOp::Substitute, AlignOp::Substitute]);
    }

    #[test]
    fn aggregation_pools_counts_not_rates() {
        // utt1: 1 error / 1 token (100%); utt2: 0 errors / 9 tokens (0%).
        // mean of rates would be 50%; the pooled rate is 10%.
        let refs = keyed(&[("u1", "x"), ("u2", "a b c d e f g h i")]);
        let hyps = keyed(&[("u1", "y"), ("u2", "a b c d e f g h i")]);
        let report = word_error_rate(&refs, &hyps).unwrap();
        assert!((report.error_rate - 10.0).abs() < 1e-12);
        assert_eq!(report.ref_tokens, 10);
        assert_eq!(report.utterances, 2);
    }

    #[test]
    fn key_mismatch_and_empty_refs_are_errors() {
        let refs = keyed(&[("u1", "a")]);
        match word_error_rate(&refs, &keyed(&[("u2", "a")])) {
            Err(EvalError::KeyMismatch { missing, extra }) => {
                assert_eq!(missing, vec!["u1"]);
                assert_eq!(extra, vec!["u2"]);
            }
            other => panic!("expected key mismatch, got {other:?}"),
        }
        assert!(matches!(
            word_error_rate(&BTreeMap::new(), &BTreeMap::new()),
            Err(EvalError::EmptyReference)
        ));
    }

    #[test]
    fn alignment_text_marks_edits() {
        let refs = keyed(&[("u1", "the cat sat")]);
        let hyps = keyed(&[("u1", "the bat sat on")]);
        let report = word_error_rate(&refs, &hyps).unwrap();
        let text = report.alignment_text();
        assert!(text.contains("== u1 (S=1 D=0 I=1)"));
        assert!(text.contains("REF: the cat sat ***"));
        assert!(text.contains("HYP: the bat sat on"));
    }

    #[test]
    fn report_json_round_trip() {
        let refs = keyed(&[("u1", "a b"), ("u2", "c")]);
        let hyps = keyed(&[("u1", "a x"), ("u2", "c")]);
        let mut report = word_error_rate(&refs, &hyps).unwrap();
        report.condition = Some(ConditionMeta {
            label: "baseline".to_string(),
            supervised_hours: 0.5,
            stages: vec!["baseline_supervised".to_string()],
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.write_json(&path).unwrap();
        let back = ScoreReport::read_json(&path).unwrap();
        assert_eq!(back.error_rate, report.error_rate);
        assert_eq!(back.counts, report.counts);
        assert_eq!(back.condition, report.condition);
        assert!(back.alignments.is_empty(), "alignments stay out of the summary");
    }

    fn fixed_rate_report(errors: usize, tokens: usize) -> ScoreReport {
        let refs: BTreeMap<String, String> = (0..tokens)
            .map(|i| (format!("u{i}"), format!("w{i}")))
            .collect();
        let hyps: BTreeMap<String, String> = (0..tokens)
            .map(|i| {
                let text = if i < errors { format!("x{i}") } else { format!("w{i}") };
                (format!("u{i}"), text)
            })
            .collect();
        word_error_rate(&refs, &hyps).unwrap()
    }

    #[test]
    fn comparison_table_rows_and_deltas() {
        let rows = vec![
            ("None".to_string(), fixed_rate_report(450, 1000)),
            ("AR".to_string(), fixed_rate_report(377, 1000)),
            ("XLS-R".to_string(), fixed_rate_report(334, 1000)),
        ];
        let table = compare_conditions(&rows, "None").unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "condition\terror_rate\tdelta_vs_None");
        assert_eq!(lines[1], "None\t45.00\t+0.00");
        assert_eq!(lines[2], "AR\t37.70\t-7.30");
        assert_eq!(lines[3], "XLS-R\t33.40\t-11.60");

        let same = vec![
            ("a".to_string(), fixed_rate_report(1, 10)),
            ("b".to_string(), fixed_rate_report(1, 10)),
        ];
        let table = compare_conditions(&same, "a").unwrap();
        assert!(table.lines().nth(2).unwrap().ends_with("+0.00"));

        assert!(matches!(
            compare_conditions(&rows, "nope"),
            Err(EvalError::BaselineMissing(_))
        ));
        assert!(matches!(
            compare_conditions(&rows[..1], "None"),
            Err(EvalError::NotEnoughReports(1))
        ));
    }
}
