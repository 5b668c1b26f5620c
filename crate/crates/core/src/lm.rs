//! Backoff n-gram language models with Witten-Bell smoothing, ARPA
//! serialization, and the word lexicon used when composing recognizer
//! output into words.
//!
//! Models are trained over abstract string symbols, so the same code
//! serves both the character-level LM (via [`char_symbols`]) and the
//! word-level LM (via [`word_symbols`]).

use crate::model::Vocabulary;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Sentence-start symbol; participates in contexts, never predicted.
pub const BOS: &str = "<s>";
/// Sentence-end symbol; predicted once per sentence.
pub const EOS: &str = "</s>";
/// Stand-in for symbols outside the model vocabulary.
pub const UNK_SYM: &str = "<unk>";
/// Space rendered as a symbol, since ARPA separates symbols with spaces.
pub const SPACE_SYM: &str = "<sp>";

/// log10 probability assigned when even the unigram table has no entry.
pub const UNK_FLOOR_LOG10: f64 = -10.0;

/// Placeholder log10 value for entries that exist only for structure
/// (the start symbol's unigram line).
const LOG10_NEVER: f64 = -99.0;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("cannot train a language model on an empty corpus")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1, got {0}")]
    BadOrder(usize),
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: character '{ch}' of word '{word}' is not in the vocabulary")]
    UnknownChar {
        path: PathBuf,
        line: usize,
        word: String,
        ch: char,
    },
    #[error("{path}:{line}: word '{word}' already has a different pronunciation")]
    ConflictingDuplicate {
        path: PathBuf,
        line: usize,
        word: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    /// Witten-Bell interpolation, converted to exact backoff form.
    WittenBell,
    /// Raw maximum-likelihood counts with no boundary padding; unseen
    /// events get essentially zero mass. Useful for hand-checked counts.
    None,
}

/// Result of scoring one symbol sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    /// Total log10 probability including the end-of-sentence step.
    pub log10: f64,
    /// How many input symbols fell outside the vocabulary.
    pub oov: usize,
}

/// Backoff n-gram model over string symbols, log10 domain throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    order: usize,
    /// n-gram → log10 conditional probability, all orders mixed.
    probs: BTreeMap<Vec<String>, f64>,
    /// context n-gram → log10 backoff weight.
    backoffs: BTreeMap<Vec<String>, f64>,
    /// Symbols the model can predict (excludes the start symbol).
    vocab: BTreeSet<String>,
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(String::as_str)
    }

    pub fn contains(&self, sym: &str) -> bool {
        self.vocab.contains(sym)
    }

    /// Stored log10 probability of an exact n-gram, if present.
    pub fn ngram_log10(&self, ngram: &[String]) -> Option<f64> {
        self.probs.get(ngram).copied()
    }

    /// log10 p(sym | history) with standard backoff semantics. Only the
    /// final `order - 1` history symbols matter.
    pub fn cond_log10(&self, history: &[String], sym: &str) -> f64 {
        let start = history.len().saturating_sub(self.order - 1);
        self.cond_backoff(&history[start..], sym)
    }

    fn cond_backoff(&self, context: &[String], sym: &str) -> f64 {
        let mut key: Vec<String> = context.to_vec();
        key.push(sym.to_string());
        if let Some(&lp) = self.probs.get(&key) {
            return lp;
        }
        if context.is_empty() {
            return UNK_FLOOR_LOG10;
        }
        let bow = self.backoffs.get(context).copied().unwrap_or(0.0);
        bow + self.cond_backoff(&context[1..], sym)
    }

    /// Score a full sentence: start context, one step per symbol, one
    /// end-of-sentence step. Out-of-vocabulary symbols are replaced by
    /// the unk symbol and counted.
    pub fn score(&self, symbols: &[String]) -> Scored {
        let mut history: Vec<String> = vec![BOS.to_string()];
        let mut total = 0.0;
        let mut oov = 0;
        for sym in symbols {
            let mapped = if self.vocab.contains(sym) {
                sym.as_str()
            } else {
                oov += 1;
                UNK_SYM
            };
            total += self.cond_log10(&history, mapped);
            history.push(mapped.to_string());
        }
        total += self.cond_log10(&history, EOS);
        Scored { log10: total, oov }
    }

    /// Largest deviation of Σ_sym p(sym | context) from 1 over the empty
    /// context and every stored backoff context.
    pub fn max_normalization_gap(&self) -> f64 {
        let mut contexts: Vec<Vec<String>> = vec![Vec::new()];
        contexts.extend(self.backoffs.keys().cloned());
        let mut worst: f64 = 0.0;
        for ctx in &contexts {
            let sum: f64 = self
                .vocab
                .iter()
                .map(|sym| 10f64.powf(self.cond_backoff(ctx, sym)))
                .sum();
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    /// Standard ARPA text form: `\data\` header, one section per order
    /// with `log10prob TAB symbols TAB log10bow` lines, `\end\` footer.
    pub fn to_arpa_string(&self) -> String {
        let mut by_order: Vec<Vec<&Vec<String>>> = vec![Vec::new(); self.order];
        for key in self.probs.keys() {
            by_order[key.len() - 1].push(key);
        }
        let mut out = String::new();
        out.push_str("\\data\\\n");
        for (i, grams) in by_order.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", i + 1, grams.len());
        }
        for (i, grams) in by_order.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", i + 1);
            for &key in grams {
                let _ = write!(out, "{}\t{}", self.probs[key], key.join(" "));
                if let Some(bow) = self.backoffs.get(key) {
                    let _ = write!(out, "\t{bow}");
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn write_arpa(&self, path: &Path) -> Result<(), LmError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_arpa_string())?;
        Ok(())
    }

    pub fn read_arpa(path: &Path) -> Result<Self, LmError> {
        let text = fs::read_to_string(path)?;
        Self::from_arpa_str(&text, path)
    }

    pub fn from_arpa_str(text: &str, origin: &Path) -> Result<Self, LmError> {
        let err = |line: usize, msg: String| LmError::Format {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut declared: BTreeMap<usize, usize> = BTreeMap::new();
        let mut probs: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        let mut backoffs: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        let mut section: Option<usize> = None;
        let mut in_data = false;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = no + 1;
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                in_data = true;
                continue;
            }
            if line == "\\end\\" {
                section = None;
                in_data = false;
                continue;
            }
            if let Some(rest) = line.strip_prefix('\\').and_then(|l| l.strip_suffix("-grams:")) {
                let k: usize = rest
                    .parse()
                    .map_err(|_| err(lineno, format!("bad section header '{line}'")))?;
                section = Some(k);
                in_data = false;
                continue;
            }
            if in_data {
                let rest = line
                    .strip_prefix("ngram ")
                    .ok_or_else(|| err(lineno, format!("unexpected line in data section: '{line}'")))?;
                let (k, n) = rest
                    .split_once('=')
                    .ok_or_else(|| err(lineno, format!("bad count line '{line}'")))?;
                declared.insert(
                    k.trim().parse().map_err(|_| err(lineno, format!("bad order '{k}'")))?,
                    n.trim().parse().map_err(|_| err(lineno, format!("bad count '{n}'")))?,
                );
                continue;
            }
            let k = section.ok_or_else(|| err(lineno, format!("entry outside any section: '{line}'")))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != k + 1 && fields.len() != k + 2 {
                return Err(err(
                    lineno,
                    format!("expected {} or {} fields for a {k}-gram, found {}", k + 1, k + 2, fields.len()),
                ));
            }
            let lp: f64 = fields[0]
                .parse()
                .map_err(|_| err(lineno, format!("bad probability '{}'", fields[0])))?;
            let gram: Vec<String> = fields[1..=k].iter().map(|s| s.to_string()).collect();
            probs.insert(gram.clone(), lp);
            if fields.len() == k + 2 {
                let bow: f64 = fields[k + 1]
                    .parse()
                    .map_err(|_| err(lineno, format!("bad backoff weight '{}'", fields[k + 1])))?;
                backoffs.insert(gram, bow);
            }
        }
        if probs.is_empty() {
            return Err(err(0, "no n-gram entries found".to_string()));
        }
        let order = *declared.keys().max().unwrap_or(&1);
        for (k, n) in &declared {
            let have = probs.keys().filter(|g| g.len() == *k).count();
            if have != *n {
                return Err(err(0, format!("declared {n} {k}-grams, found {have}")));
            }
        }
        let vocab: BTreeSet<String> = probs
            .keys()
            .filter(|g| g.len() == 1 && g[0] != BOS)
            .map(|g| g[0].clone())
            .collect();
        Ok(NgramLm {
            order,
            probs,
            backoffs,
            vocab,
        })
    }
}

/// Train a backoff model of the given order on tokenized sentences.
pub fn train_ngram(
    corpus: &[Vec<String>],
    order: usize,
    smoothing: Smoothing,
) -> Result<NgramLm, LmError> {
    if order == 0 {
        return Err(LmError::BadOrder(order));
    }
    if corpus.iter().all(Vec::is_empty) {
        return Err(LmError::EmptyCorpus);
    }
    match smoothing {
        Smoothing::WittenBell => train_witten_bell(corpus, order),
        Smoothing::None => train_unsmoothed(corpus, order),
    }
}

/// n-gram counts of every order, with a single start pad per sentence.
fn count_ngrams(corpus: &[Vec<String>], order: usize, pad: bool) -> Vec<BTreeMap<Vec<String>, u64>> {
    let mut counts: Vec<BTreeMap<Vec<String>, u64>> = vec![BTreeMap::new(); order];
    for sent in corpus {
        if sent.is_empty() && !pad {
            continue;
        }
        let mut toks: Vec<&str> = Vec::with_capacity(sent.len() + 2);
        if pad {
            toks.push(BOS);
        }
        toks.extend(sent.iter().map(String::as_str));
        if pad {
            toks.push(EOS);
        }
        for k in 1..=order {
            for win in toks.windows(k) {
                if k == 1 && win[0] == BOS {
                    continue;
                }
                let gram: Vec<String> = win.iter().map(|s| s.to_string()).collect();
                *counts[k - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }
    counts
}

fn train_witten_bell(corpus: &[Vec<String>], order: usize) -> Result<NgramLm, LmError> {
    let counts = count_ngrams(corpus, order, true);
    let mut vocab: BTreeSet<String> = counts[0].keys().map(|g| g[0].clone()).collect();
    vocab.insert(UNK_SYM.to_string());

    let mut lm = NgramLm {
        order,
        probs: BTreeMap::new(),
        backoffs: BTreeMap::new(),
        vocab: vocab.clone(),
    };

    // Unigrams: interpolate observed relative frequencies with the uniform
    // distribution, weighted by the number of distinct observed types.
    let total: u64 = counts[0].values().sum();
    let distinct = counts[0].len() as f64;
    let uniform = 1.0 / vocab.len() as f64;
    let denom = total as f64 + distinct;
    for sym in &vocab {
        let c = counts[0].get(&vec![sym.clone()]).copied().unwrap_or(0);
        let p = (c as f64 + distinct * uniform) / denom;
        lm.probs.insert(vec![sym.clone()], p.log10());
    }
    lm.probs.insert(vec![BOS.to_string()], LOG10_NEVER);

    // Higher orders: per context, interpolate with the next-lower-order
    // conditional, then convert the interpolated distribution into exact
    // backoff form (so the serialized model is normalized by construction).
    for k in 2..=order {
        let mut by_context: BTreeMap<Vec<String>, Vec<(String, u64)>> = BTreeMap::new();
        for (gram, &c) in &counts[k - 1] {
            let (ctx, sym) = gram.split_at(k - 1);
            by_context
                .entry(ctx.to_vec())
                .or_default()
                .push((sym[0].clone(), c));
        }
        let mut new_probs: Vec<(Vec<String>, f64)> = Vec::new();
        let mut new_bows: Vec<(Vec<String>, f64)> = Vec::new();
        for (ctx, seen) in &by_context {
            let ctx_total: u64 = seen.iter().map(|(_, c)| c).sum();
            let types = seen.len() as f64;
            let denom = ctx_total as f64 + types;
            let mut seen_mass = 0.0;
            let mut lower_mass = 0.0;
            for (sym, c) in seen {
                let lower = 10f64.powf(lm.cond_backoff(&ctx[1..], sym));
                let p = (*c as f64 + types * lower) / denom;
                let mut gram = ctx.clone();
                gram.push(sym.clone());
                new_probs.push((gram, p.log10()));
                seen_mass += p;
                lower_mass += lower;
            }
            let left = 1.0 - seen_mass;
            let lower_left = 1.0 - lower_mass;
            let bow = if lower_left.abs() < 1e-12 {
                1.0
            } else {
                left / lower_left
            };
            new_bows.push((ctx.clone(), bow.log10()));
        }
        for (gram, lp) in new_probs {
            lm.probs.insert(gram, lp);
        }
        for (ctx, bow) in new_bows {
            lm.backoffs.insert(ctx, bow);
        }
    }
    Ok(lm)
}

fn train_unsmoothed(corpus: &[Vec<String>], order: usize) -> Result<NgramLm, LmError> {
    let counts = count_ngrams(corpus, order, false);
    let vocab: BTreeSet<String> = counts[0].keys().map(|g| g[0].clone()).collect();
    let mut lm = NgramLm {
        order,
        probs: BTreeMap::new(),
        backoffs: BTreeMap::new(),
        vocab,
    };
    let total: u64 = counts[0].values().sum();
    for (gram, &c) in &counts[0] {
        lm.probs
            .insert(gram.clone(), (c as f64 / total as f64).log10());
    }
    for k in 2..=order {
        let mut ctx_totals: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for (gram, &c) in &counts[k - 1] {
            *ctx_totals.entry(gram[..k - 1].to_vec()).or_insert(0) += c;
        }
        for (gram, &c) in &counts[k - 1] {
            let ctx_total = ctx_totals[&gram[..k - 1]];
            lm.probs
                .insert(gram.clone(), (c as f64 / ctx_total as f64).log10());
        }
        // Explicit near-zero backoff keeps unseen continuations at
        // essentially zero mass, so stored contexts remain normalized.
        for ctx in ctx_totals.keys() {
            lm.backoffs.insert(ctx.clone(), LOG10_NEVER);
        }
    }
    Ok(lm)
}

/// Transcript text as character-LM symbols (space becomes [`SPACE_SYM`]).
pub fn char_symbols(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| {
            if c == ' ' {
                SPACE_SYM.to_string()
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Transcript text as word-LM symbols (whitespace separated).
pub fn word_symbols(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_string()).collect()
}

/// Word → character-sequence mapping for composing recognizer output
/// into words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<char>>,
    /// Character separating words in the recognizer's output alphabet.
    pub boundary: char,
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pronunciation(&self, word: &str) -> Option<&[char]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn words(&self) -> impl Iterator<Item = (&str, &[char])> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    pub fn write(&self, path: &Path) -> Result<(), LmError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = String::new();
        for (word, pron) in &self.entries {
            let spelled: Vec<String> = pron.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "{word}\t{}", spelled.join(" "));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Parse and validate a lexicon file: `word TAB c h a r s`, one entry
/// per line, `#` comments. Every character must be in the vocabulary;
/// duplicate words must agree on the pronunciation.
pub fn load_lexicon(path: &Path, vocab: &Vocabulary) -> Result<Lexicon, LmError> {
    let text = fs::read_to_string(path)?;
    parse_lexicon(&text, path, vocab)
}

/// Build a spelled-pronunciation lexicon from already-normalized texts:
/// one entry per distinct word, pronounced as its character sequence.
pub fn lexicon_from_texts<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    vocab: &Vocabulary,
) -> Result<Lexicon, LmError> {
    let words: BTreeSet<&str> = texts
        .into_iter()
        .flat_map(str::split_whitespace)
        .collect();
    let mut body = String::new();
    for word in words {
        body.push_str(word);
        body.push('\t');
        let mut first = true;
        for ch in word.chars() {
            if !first {
                body.push(' ');
            }
            body.push(ch);
            first = false;
        }
        body.push('\n');
    }
    parse_lexicon(&body, Path::new("<derived>"), vocab)
}

pub fn parse_lexicon(text: &str, origin: &Path, vocab: &Vocabulary) -> Result<Lexicon, LmError> {
    let mut entries: BTreeMap<String, Vec<char>> = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let lineno = no + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, spell) = line.split_once('\t').ok_or_else(|| LmError::Format {
            path: origin.to_path_buf(),
            line: lineno,
            msg: "expected 'word TAB space-separated characters'".to_string(),
        })?;
        let word = word.trim();
        let mut pron: Vec<char> = Vec::new();
        for piece in spell.split_whitespace() {
            let mut chars = piece.chars();
            let (ch, extra) = (chars.next(), chars.next());
            let ch = match (ch, extra) {
                (Some(c), None) => c,
                _ => {
                    return Err(LmError::Format {
                        path: origin.to_path_buf(),
                        line: lineno,
                        msg: format!("'{piece}' is not a single character"),
                    })
                }
            };
            if vocab.char_id(ch).is_none() {
                return Err(LmError::UnknownChar {
                    path: origin.to_path_buf(),
                    line: lineno,
                    word: word.to_string(),
                    ch,
                });
            }
            pron.push(ch);
        }
        if pron.is_empty() {
            return Err(LmError::Format {
                path: origin.to_path_buf(),
                line: lineno,
                msg: format!("word '{word}' has an empty pronunciation"),
            });
        }
        if let Some(existing) = entries.get(word) {
            if existing != &pron {
                return Err(LmError::ConflictingDuplicate {
                    path: origin.to_path_buf(),
                    line: lineno,
                    word: word.to_string(),
                });
            }
        } else {
            entries.insert(word.to_string(), pron);
        }
    }
    Ok(Lexicon {
        entries,
        boundary: ' ',
    })
}
