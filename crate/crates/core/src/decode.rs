//! Inference: greedy CTC decoding, CTC prefix beam search composed
//! with a word lexicon and n-gram LM, and label-synchronous joint
//! CTC/attention beam search. All scores are natural-log domain; the
//! LM's log10 values are converted on entry.

use crate::features::{apply_cmvn, compute_fbank, CmvnStats, FbankConfig};
use crate::lm::{Lexicon, NgramLm, EOS, SPACE_SYM};
use crate::mat::Mat;
use crate::model::{
    ModelConfig, ModelError, Network, ParamStore, Vocabulary, BLANK, SOS_EOS,
};
use crate::scalar::{log_add, Scalar};
use rayon::prelude::*;
use rustfft::FftNum;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const NEG_INF: f64 = f64::NEG_INFINITY;
const LN10: f64 = std::f64::consts::LN_10;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("lexicon has no entries")]
    EmptyLexicon,
    #[error("{mode} decoding requires {what}")]
    MissingResource { mode: String, what: String },
    #[error("invalid decode config: {0}")]
    BadConfig(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    CtcGreedy,
    CtcBeamLm,
    JointAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    /// Weight on the (word or character) LM log-probability.
    pub lm_weight: f64,
    /// CTC share of the joint attention score, in [0, 1].
    pub ctc_weight_decode: f64,
    /// Per-word bonus in ctc_beam_lm mode; positive favors more words.
    pub length_penalty: f64,
    /// Output-length cap for joint search; 0 means one label per
    /// encoder frame.
    pub max_output_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::CtcGreedy,
            beam_size: 1,
            lm_weight: 0.0,
            ctc_weight_decode: 0.3,
            length_penalty: 0.0,
            max_output_len: 0,
        }
    }
}

impl DecodeConfig {
    pub fn ctc_beam_default() -> Self {
        DecodeConfig {
            mode: DecodeMode::CtcBeamLm,
            beam_size: 16,
            lm_weight: 0.5,
            ..DecodeConfig::default()
        }
    }

    pub fn joint_default() -> Self {
        DecodeConfig {
            mode: DecodeMode::JointAttention,
            beam_size: 8,
            ..DecodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::BadConfig("beam_size must be at least 1".into()));
        }
        if self.lm_weight < 0.0 {
            return Err(DecodeError::BadConfig(format!(
                "lm_weight must be non-negative, got {}",
                self.lm_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight_decode) {
            return Err(DecodeError::BadConfig(format!(
                "ctc_weight_decode must lie in [0, 1], got {}",
                self.ctc_weight_decode
            )));
        }
        Ok(())
    }
}

/// One ranked decoding result. Scores are natural-log domain;
/// `score_total` is the mode's weighted combination of the parts
/// (plus the per-word bonus in beam-lexicon mode).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub text: String,
    pub score_total: f64,
    pub score_acoustic: f64,
    pub score_lm: f64,
    pub score_attention: f64,
    /// exp(score_total / max(1, labels)), clamped to [0, 1].
    pub confidence: f64,
    /// Set when the search lost every viable prefix and fell back to
    /// an empty output.
    pub collapsed: bool,
}

impl Hypothesis {
    fn empty_collapsed() -> Self {
        Hypothesis {
            labels: Vec::new(),
            text: String::new(),
            score_total: NEG_INF,
            score_acoustic: NEG_INF,
            score_lm: 0.0,
            score_attention: 0.0,
            confidence: 0.0,
            collapsed: true,
        }
    }
}

fn confidence_of(total: f64, len: usize) -> f64 {
    (total / len.max(1) as f64).exp().clamp(0.0, 1.0)
}

/// Per-frame argmax, collapse consecutive repeats, drop blanks.
pub fn ctc_greedy<T: Scalar>(log_probs: &Mat<T>, vocab: &Vocabulary) -> Hypothesis {
    let mut labels = Vec::new();
    let mut acoustic = 0.0;
    let mut prev = usize::MAX;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        acoustic += row[best].to_f64_lossy();
        if best != BLANK && best != prev {
            labels.push(best);
        }
        prev = best;
    }
    let text = vocab.decode(&labels);
    Hypothesis {
        confidence: confidence_of(acoustic, labels.len()),
        text,
        score_total: acoustic,
        score_acoustic: acoustic,
        score_lm: 0.0,
        score_attention: 0.0,
        labels,
        collapsed: false,
    }
}

// ---------------------------------------------------------------------------
// Lexicon trie + CTC prefix beam search with word-level LM fusion
// ---------------------------------------------------------------------------

struct TrieNode {
    children: BTreeMap<usize, usize>,
    /// Words whose pronunciation ends here, sorted.
    words: Vec<String>,
}

struct LexTrie {
    nodes: Vec<TrieNode>,
    space_id: Option<usize>,
}

impl LexTrie {
    const ROOT: usize = 0;

    fn build(lexicon: &Lexicon, vocab: &Vocabulary) -> Result<Self, DecodeError> {
        if lexicon.is_empty() {
            return Err(DecodeError::EmptyLexicon);
        }
        let mut trie = LexTrie {
            nodes: vec![TrieNode {
                children: BTreeMap::new(),
                words: Vec::new(),
            }],
            space_id: vocab.char_id(lexicon.boundary),
        };
        for (word, pron) in lexicon.words() {
            let mut node = Self::ROOT;
            for &ch in pron {
                let id = vocab.char_id(ch).ok_or_else(|| DecodeError::BadConfig(
                    format!("lexicon character '{ch}' missing from the vocabulary"),
                ))?;
                node = match trie.nodes[node].children.get(&id) {
                    Some(&n) => n,
                    None => {
                        trie.nodes.push(TrieNode {
                            children: BTreeMap::new(),
                            words: Vec::new(),
                        });
                        let n = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(id, n);
                        n
                    }
                };
            }
            trie.nodes[node].words.push(word.to_string());
        }
        for node in &mut trie.nodes {
            node.words.sort();
            node.words.dedup();
        }
        Ok(trie)
    }
}

#[derive(Clone)]
struct Prefix {
    /// ln prob of alignments for this label sequence ending in blank.
    p_b: f64,
    /// ln prob of alignments ending in the final label.
    p_nb: f64,
    /// Raw LM ln prob of the completed words so far.
    lm_ln: f64,
    /// Word history, starting with the sentence-start symbol.
    hist: Vec<String>,
    /// Trie position inside the current partial word.
    node: usize,
}

impl Prefix {
    fn acoustic(&self) -> f64 {
        log_add(self.p_b, self.p_nb)
    }

    fn running_score(&self, cfg: &DecodeConfig) -> f64 {
        self.acoustic()
            + cfg.lm_weight * self.lm_ln
            + cfg.length_penalty * (self.hist.len() - 1) as f64
    }
}

/// Pick the LM-best word for a completed pronunciation (lexicographic
/// tie-break keeps results deterministic).
fn best_word<'w>(words: &'w [String], hist: &[String], lm: &NgramLm) -> (&'w str, f64) {
    let mut best: Option<(&str, f64)> = None;
    for w in words {
        let lp = lm.cond_log10(hist, w) * LN10;
        if best.map_or(true, |(_, b)| lp > b) {
            best = Some((w, lp));
        }
    }
    best.expect("completed trie nodes hold at least one word")
}

/// CTC prefix beam search constrained to lexicon words, applying the
/// word LM whenever a word completes. Returns hypotheses ranked by
/// total score; only lexicon-composable outputs are produced.
pub fn ctc_beam_lm<T: Scalar>(
    log_probs: &Mat<T>,
    lexicon: &Lexicon,
    lm: &NgramLm,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    let trie = LexTrie::build(lexicon, vocab)?;

    let mut beam: BTreeMap<Vec<usize>, Prefix> = BTreeMap::new();
    beam.insert(
        Vec::new(),
        Prefix {
            p_b: 0.0,
            p_nb: NEG_INF,
            lm_ln: 0.0,
            hist: vec![crate::lm::BOS.to_string()],
            node: LexTrie::ROOT,
        },
    );

    for t in 0..log_probs.rows() {
        let row: Vec<f64> = log_probs.row(t).iter().map(|v| v.to_f64_lossy()).collect();
        let mut next: BTreeMap<Vec<usize>, Prefix> = BTreeMap::new();
        for (labels, st) in &beam {
            // stay on the same prefix: emit blank, or repeat the last
            // label without an intervening blank
            let entry = next.entry(labels.clone()).or_insert_with(|| Prefix {
                p_b: NEG_INF,
                p_nb: NEG_INF,
                ..st.clone()
            });
            entry.p_b = log_add(entry.p_b, st.acoustic() + row[BLANK]);
            if let Some(&last) = labels.last() {
                entry.p_nb = log_add(entry.p_nb, st.p_nb + row[last]);
            }

            // extend deeper into the current word
            for (&ch_id, &child) in &trie.nodes[st.node].children {
                let base = if labels.last() == Some(&ch_id) {
                    st.p_b
                } else {
                    st.acoustic()
                };
                if base == NEG_INF {
                    continue;
                }
                let mut labels2 = labels.clone();
                labels2.push(ch_id);
                let entry = next.entry(labels2).or_insert_with(|| Prefix {
                    p_b: NEG_INF,
                    p_nb: NEG_INF,
                    lm_ln: st.lm_ln,
                    hist: st.hist.clone(),
                    node: child,
                });
                entry.p_nb = log_add(entry.p_nb, base + row[ch_id]);
            }

            // close the current word with the boundary character
            if let (Some(space_id), false) = (trie.space_id, trie.nodes[st.node].words.is_empty())
            {
                let base = if labels.last() == Some(&space_id) {
                    st.p_b
                } else {
                    st.acoustic()
                };
                if base > NEG_INF {
                    let (word, word_lp) = best_word(&trie.nodes[st.node].words, &st.hist, lm);
                    let mut labels2 = labels.clone();
                    labels2.push(space_id);
                    let mut hist2 = st.hist.clone();
                    hist2.push(word.to_string());
                    let entry = next.entry(labels2).or_insert_with(|| Prefix {
                        p_b: NEG_INF,
                        p_nb: NEG_INF,
                        lm_ln: st.lm_ln + word_lp,
                        hist: hist2,
                        node: LexTrie::ROOT,
                    });
                    entry.p_nb = log_add(entry.p_nb, base + row[space_id]);
                }
            }
        }

        let mut ranked: Vec<(Vec<usize>, Prefix)> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.running_score(cfg)
                .partial_cmp(&a.1.running_score(cfg))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(cfg.beam_size);
        beam = ranked.into_iter().collect();
    }

    // finalize: the partial word must be empty or complete a lexicon word
    let mut out: Vec<Hypothesis> = Vec::new();
    for (labels, st) in &beam {
        let acoustic = st.acoustic();
        if acoustic == NEG_INF {
            continue;
        }
        let (lm_final, words) = if st.node == LexTrie::ROOT {
            let end = lm.cond_log10(&st.hist, EOS) * LN10;
            (st.lm_ln + end, st.hist.len() - 1)
        } else if !trie.nodes[st.node].words.is_empty() {
            let (word, word_lp) = best_word(&trie.nodes[st.node].words, &st.hist, lm);
            let mut hist2 = st.hist.clone();
            hist2.push(word.to_string());
            let end = lm.cond_log10(&hist2, EOS) * LN10;
            (st.lm_ln + word_lp + end, hist2.len() - 1)
        } else {
            continue;
        };
        let total = acoustic + cfg.lm_weight * lm_final + cfg.length_penalty * words as f64;
        let text = vocab.decode(labels).trim_end_matches(' ').to_string();
        out.push(Hypothesis {
            confidence: confidence_of(total, labels.len()),
            text,
            score_total: total,
            score_acoustic: acoustic,
            score_lm: lm_final,
            score_attention: 0.0,
            labels: labels.clone(),
            collapsed: false,
        });
    }
    if out.is_empty() {
        return Ok(vec![Hypothesis::empty_collapsed()]);
    }
    out.sort_by(|a, b| {
        b.score_total
            .partial_cmp(&a.score_total)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.labels.cmp(&b.labels))
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Incremental CTC prefix scoring for label-synchronous search
// ---------------------------------------------------------------------------

/// Incremental prefix probabilities over fixed per-frame CTC
/// log-posteriors: extending a prefix by one label costs O(frames).
pub struct CtcPrefixScorer {
    logp: Vec<Vec<f64>>,
    blank: usize,
}

/// Per-prefix forward state: alignment mass ending in blank / in the
/// final label at each frame, plus the total prefix probability.
#[derive(Clone)]
pub struct CtcPrefixState {
    r_b: Vec<f64>,
    r_nb: Vec<f64>,
    /// ln probability that the frames emit this prefix followed by
    /// anything.
    pub prefix_ln: f64,
    last: Option<usize>,
}

impl CtcPrefixScorer {
    pub fn new<T: Scalar>(log_probs: &Mat<T>, blank: usize) -> Self {
        let logp = (0..log_probs.rows())
            .map(|t| log_probs.row(t).iter().map(|v| v.to_f64_lossy()).collect())
            .collect();
        CtcPrefixScorer { logp, blank }
    }

    pub fn frames(&self) -> usize {
        self.logp.len()
    }

    /// State for the empty prefix.
    pub fn initial(&self) -> CtcPrefixState {
        let mut r_b = Vec::with_capacity(self.logp.len());
        let mut acc = 0.0;
        for row in &self.logp {
            acc += row[self.blank];
            r_b.push(acc);
        }
        CtcPrefixState {
            r_b,
            r_nb: vec![NEG_INF; self.logp.len()],
            prefix_ln: 0.0,
            last: None,
        }
    }

    /// Extend the prefix by label `c`.
    pub fn extend(&self, st: &CtcPrefixState, c: usize) -> CtcPrefixState {
        let t_max = self.logp.len();
        let mut r_b = vec![NEG_INF; t_max];
        let mut r_nb = vec![NEG_INF; t_max];
        let mut psi = NEG_INF;
        for t in 0..t_max {
            let (prev_b, prev_nb) = if t == 0 {
                // before the first frame only the empty prefix exists
                (if st.last.is_none() { 0.0 } else { NEG_INF }, NEG_INF)
            } else {
                (st.r_b[t - 1], st.r_nb[t - 1])
            };
            // mass that finishes the old prefix and may start `c` at t
            let phi = if st.last == Some(c) {
                prev_b
            } else {
                log_add(prev_b, prev_nb)
            };
            let emit = self.logp[t][c];
            let self_nb = if t == 0 { NEG_INF } else { r_nb[t - 1] };
            r_nb[t] = emit + log_add(self_nb, phi);
            let (own_b, own_nb) = if t == 0 {
                (NEG_INF, NEG_INF)
            } else {
                (r_b[t - 1], r_nb[t - 1])
            };
            r_b[t] = self.logp[t][self.blank] + log_add(own_b, own_nb);
            psi = log_add(psi, phi + emit);
        }
        CtcPrefixState {
            r_b,
            r_nb,
            prefix_ln: psi,
            last: Some(c),
        }
    }

    /// ln probability of the prefix as a complete output sequence.
    pub fn complete(&self, st: &CtcPrefixState) -> f64 {
        match st.last {
            None => *st.r_b.last().unwrap_or(&0.0),
            Some(_) => log_add(
                *st.r_b.last().unwrap_or(&NEG_INF),
                *st.r_nb.last().unwrap_or(&NEG_INF),
            ),
        }
    }
}

// ---------------------------------------------------------------------------
// Joint CTC/attention label-synchronous beam search
// ---------------------------------------------------------------------------

struct JointHyp {
    tokens: Vec<usize>,
    att_ln: f64,
    lm_ln: f64,
    ctc_state: CtcPrefixState,
    ctc_ln: f64,
}

impl JointHyp {
    fn combined(&self, cfg: &DecodeConfig) -> f64 {
        cfg.ctc_weight_decode * self.ctc_ln
            + (1.0 - cfg.ctc_weight_decode) * self.att_ln
            + cfg.lm_weight * self.lm_ln
    }
}

fn lm_char_step(lm: Option<&NgramLm>, history: &[String], sym: &str) -> f64 {
    lm.map_or(0.0, |m| m.cond_log10(history, sym) * LN10)
}

fn char_lm_symbol(vocab: &Vocabulary, id: usize) -> String {
    match vocab.id_char(id) {
        Some(' ') => SPACE_SYM.to_string(),
        Some(c) => c.to_string(),
        None => crate::lm::UNK_SYM.to_string(),
    }
}

/// Beam search over decoder labels; per step the score is
/// `ctc_weight_decode · CTC-prefix + (1 − ctc_weight_decode) · attention
/// + lm_weight · char-LM`, and final hypotheses are ranked by the
/// length-normalized total.
pub fn joint_attention_decode<T: Scalar>(
    model_cfg: &ModelConfig,
    params: &ParamStore<T>,
    vocab: &Vocabulary,
    feats: &Mat<T>,
    cfg: &DecodeConfig,
    char_lm: Option<&NgramLm>,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    // one eval-mode encoder pass; the decoder re-imports its output
    let (enc_mat, ctc_lp) = {
        let mut net = Network::new_eval(model_cfg);
        let enc = net.encode(params, feats, None)?;
        let lp = net.ctc_log_probs(params, enc.final_id)?;
        (net.value(enc.final_id).clone(), net.value(lp).clone())
    };
    let scorer = CtcPrefixScorer::new(&ctc_lp, BLANK);
    let max_len = if cfg.max_output_len > 0 {
        cfg.max_output_len
    } else {
        scorer.frames()
    };

    let mut active = vec![JointHyp {
        tokens: Vec::new(),
        att_ln: 0.0,
        lm_ln: 0.0,
        ctc_state: scorer.initial(),
        ctc_ln: 0.0,
    }];
    let mut done: Vec<JointHyp> = Vec::new();

    for step in 0..=max_len {
        if active.is_empty() {
            break;
        }
        let force_finish = step == max_len;
        let mut continuing: Vec<JointHyp> = Vec::new();
        for hyp in &active {
            let mut tokens = Vec::with_capacity(hyp.tokens.len() + 1);
            tokens.push(SOS_EOS);
            tokens.extend_from_slice(&hyp.tokens);
            let mut net = Network::new_eval(model_cfg);
            let enc_id = net.tape.constant(enc_mat.clone());
            let lp_id = net.decoder_log_probs(params, enc_id, &tokens)?;
            let lp = net.value(lp_id);
            let row = lp.row(lp.rows() - 1);
            let lm_hist: Vec<String> = std::iter::once(crate::lm::BOS.to_string())
                .chain(hyp.tokens.iter().map(|&id| char_lm_symbol(vocab, id)))
                .collect();

            // finishing: emit the end marker
            let att_end = hyp.att_ln + row[SOS_EOS].to_f64_lossy();
            let lm_end = hyp.lm_ln + lm_char_step(char_lm, &lm_hist, EOS);
            done.push(JointHyp {
                tokens: hyp.tokens.clone(),
                att_ln: att_end,
                lm_ln: lm_end,
                ctc_ln: scorer.complete(&hyp.ctc_state),
                ctc_state: hyp.ctc_state.clone(),
            });

            if force_finish {
                continue;
            }
            for c in 0..vocab.size() {
                if c == BLANK || c == SOS_EOS {
                    continue;
                }
                let ctc_state = scorer.extend(&hyp.ctc_state, c);
                if cfg.ctc_weight_decode > 0.0 && ctc_state.prefix_ln == NEG_INF {
                    continue;
                }
                let mut tokens2 = hyp.tokens.clone();
                tokens2.push(c);
                continuing.push(JointHyp {
                    tokens: tokens2,
                    att_ln: hyp.att_ln + row[c].to_f64_lossy(),
                    lm_ln: hyp.lm_ln
                        + lm_char_step(char_lm, &lm_hist, &char_lm_symbol(vocab, c)),
                    ctc_ln: ctc_state.prefix_ln,
                    ctc_state,
                });
            }
        }
        sort_joint(&mut continuing, cfg);
        continuing.truncate(cfg.beam_size);
        sort_joint(&mut done, cfg);
        done.truncate(cfg.beam_size);
        active = continuing;
    }

    let mut out: Vec<Hypothesis> = done
        .iter()
        .map(|h| {
            let total = h.combined(cfg);
            Hypothesis {
                labels: h.tokens.clone(),
                text: vocab.decode(&h.tokens),
                score_total: total,
                score_acoustic: h.ctc_ln,
                score_lm: h.lm_ln,
                score_attention: h.att_ln,
                confidence: confidence_of(total, h.tokens.len()),
                collapsed: false,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        let na = a.score_total / a.labels.len().max(1) as f64;
        let nb = b.score_total / b.labels.len().max(1) as f64;
        nb.partial_cmp(&na)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.labels.cmp(&b.labels))
    });
    if out.is_empty() {
        out.push(Hypothesis::empty_collapsed());
    }
    Ok(out)
}

fn sort_joint(hyps: &mut [JointHyp], cfg: &DecodeConfig) {
    hyps.sort_by(|a, b| {
        b.combined(cfg)
            .partial_cmp(&a.combined(cfg))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

// ---------------------------------------------------------------------------
// Manifest transcription and the hypothesis TSV contract
// ---------------------------------------------------------------------------

pub const HYP_HEADER: &str = "utt_id\ttext\tconfidence\tscore_total";
pub const ERR_HEADER: &str = "utt_id\terror_class\tmessage";

/// One row of a hypothesis TSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct HypRow {
    pub utt_id: String,
    pub text: String,
    pub confidence: f64,
    pub score_total: f64,
}

pub fn write_hypotheses_tsv(path: &Path, rows: &[HypRow]) -> Result<(), DecodeError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{HYP_HEADER}")?;
    for row in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            row.utt_id, row.text, row.confidence, row.score_total
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hypotheses_tsv(path: &Path) -> Result<Vec<HypRow>, DecodeError> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: String| DecodeError::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == HYP_HEADER => {}
        Some((_, first)) => {
            return Err(err(1, format!("expected header '{HYP_HEADER}', found '{first}'")))
        }
        None => return Err(err(1, "empty hypothesis file".to_string())),
    }
    let mut rows = Vec::new();
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(no + 1, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let confidence: f64 = fields[2]
            .parse()
            .map_err(|_| err(no + 1, format!("bad confidence '{}'", fields[2])))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(err(no + 1, format!("confidence {confidence} outside [0, 1]")));
        }
        let score_total: f64 = fields[3]
            .parse()
            .map_err(|_| err(no + 1, format!("bad score '{}'", fields[3])))?;
        rows.push(HypRow {
            utt_id: fields[0].to_string(),
            text: fields[1].to_string(),
            confidence,
            score_total,
        });
    }
    Ok(rows)
}

/// One per-utterance failure record.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrRow {
    pub utt_id: String,
    pub class: String,
    pub message: String,
}

pub fn write_errors_tsv(path: &Path, rows: &[ErrRow]) -> Result<(), DecodeError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{ERR_HEADER}")?;
    for row in rows {
        let msg = row.message.replace(['\t', '\n'], " ");
        writeln!(w, "{}\t{}\t{}", row.utt_id, row.class, msg)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_errors_tsv(path: &Path) -> Result<Vec<ErrRow>, DecodeError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == ERR_HEADER => {}
        _ => {
            return Err(DecodeError::Format {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("expected header '{ERR_HEADER}'"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DecodeError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        rows.push(ErrRow {
            utt_id: fields[0].to_string(),
            class: fields[1].to_string(),
            message: fields[2].to_string(),
        });
    }
    Ok(rows)
}

/// Everything needed to turn audio into hypotheses.
pub struct TranscribeSetup<'a, T: Scalar> {
    pub model_cfg: &'a ModelConfig,
    pub params: &'a ParamStore<T>,
    pub vocab: &'a Vocabulary,
    pub fbank: &'a FbankConfig,
    pub cmvn: Option<&'a CmvnStats<T>>,
    pub decode: &'a DecodeConfig,
    pub lexicon: Option<&'a Lexicon>,
    pub word_lm: Option<&'a NgramLm>,
    pub char_lm: Option<&'a NgramLm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranscribeSummary {
    pub decoded: usize,
    pub failed: usize,
}

fn decode_one<T: Scalar + FftNum>(
    setup: &TranscribeSetup<'_, T>,
    utt: &crate::corpus::Utterance,
    audio_base: &Path,
) -> Result<Hypothesis, (String, String)> {
    let audio_path = if Path::new(&utt.audio).is_absolute() {
        PathBuf::from(&utt.audio)
    } else {
        audio_base.join(&utt.audio)
    };
    let wave = crate::audio::read_wav(&audio_path).map_err(|e| ("audio".to_string(), e.to_string()))?;
    let samples: Vec<T> = wave.samples.iter().map(|&s| T::of_f64(s)).collect();
    let feats = compute_fbank(&utt.utt_id, &samples, wave.sample_rate, setup.fbank)
        .map_err(|e| ("features".to_string(), e.to_string()))?;
    let feats = match setup.cmvn {
        Some(stats) => apply_cmvn(&feats, stats).frames,
        None => feats.frames,
    };
    let decode_err = |e: DecodeError| ("decode".to_string(), e.to_string());
    match setup.decode.mode {
        DecodeMode::CtcGreedy => {
            let lp = encoder_ctc_log_probs(setup.model_cfg, setup.params, &feats)
                .map_err(decode_err)?;
            Ok(ctc_greedy(&lp, setup.vocab))
        }
        DecodeMode::CtcBeamLm => {
            let lexicon = setup.lexicon.ok_or_else(|| {
                decode_err(DecodeError::MissingResource {
                    mode: "ctc_beam_lm".to_string(),
                    what: "a lexicon".to_string(),
                })
            })?;
            let lm = setup.word_lm.ok_or_else(|| {
                decode_err(DecodeError::MissingResource {
                    mode: "ctc_beam_lm".to_string(),
                    what: "a word language model".to_string(),
                })
            })?;
            let lp = encoder_ctc_log_probs(setup.model_cfg, setup.params, &feats)
                .map_err(decode_err)?;
            let hyps =
                ctc_beam_lm(&lp, lexicon, lm, setup.vocab, setup.decode).map_err(decode_err)?;
            Ok(hyps.into_iter().next().expect("beam returns at least one hypothesis"))
        }
        DecodeMode::JointAttention => {
            let hyps = joint_attention_decode(
                setup.model_cfg,
                setup.params,
                setup.vocab,
                &feats,
                setup.decode,
                setup.char_lm,
            )
            .map_err(decode_err)?;
            Ok(hyps.into_iter().next().expect("beam returns at least one hypothesis"))
        }
    }
}

/// Eval-mode CTC log-posteriors for a feature matrix.
pub fn encoder_ctc_log_probs<T: Scalar>(
    model_cfg: &ModelConfig,
    params: &ParamStore<T>,
    feats: &Mat<T>,
) -> Result<Mat<T>, DecodeError> {
    let mut net = Network::new_eval(model_cfg);
    let enc = net.encode(params, feats, None)?;
    let lp = net.ctc_log_probs(params, enc.final_id)?;
    Ok(net.value(lp).clone())
}

/// Decode every utterance of a manifest; per-utterance failures go to
/// the errors file instead of aborting the batch. Outputs follow the
/// manifest order, so repeated runs are byte-identical.
pub fn transcribe_manifest<T: Scalar + FftNum>(
    setup: &TranscribeSetup<'_, T>,
    manifest: &crate::corpus::Manifest,
    audio_base: &Path,
    out_tsv: &Path,
    err_tsv: &Path,
) -> Result<TranscribeSummary, DecodeError> {
    let results: Vec<Result<Hypothesis, (String, String)>> = manifest
        .utterances
        .par_iter()
        .map(|utt| decode_one(setup, utt, audio_base))
        .collect();
    let mut hyps = Vec::new();
    let mut errs = Vec::new();
    for (utt, res) in manifest.utterances.iter().zip(results) {
        match res {
            Ok(h) => hyps.push(HypRow {
                utt_id: utt.utt_id.clone(),
                text: h.text,
                confidence: h.confidence,
                score_total: h.score_total,
            }),
            Err((class, message)) => errs.push(ErrRow {
                utt_id: utt.utt_id.clone(),
                class,
                message,
            }),
        }
    }
    write_hypotheses_tsv(out_tsv, &hyps)?;
    write_errors_tsv(err_tsv, &errs)?;
    Ok(TranscribeSummary {
        decoded: hyps.len(),
        failed: errs.len(),
    })
}
