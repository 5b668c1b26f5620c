//! Character vocabulary with fixed special-symbol slots.
//!
//! Index 0 is the CTC blank, index 1 the shared start/end-of-sequence
//! marker, index 2 the unknown character; real characters start at 3 in
//! sorted order so a vocabulary built from the same text is always
//! identical.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BLANK: usize = 0;
pub const SOS_EOS: usize = 1;
pub const UNK: usize = 2;
pub const FIRST_CHAR: usize = 3;

/// Stand-in character emitted when decoding an unknown-symbol id.
pub const UNK_CHAR: char = '\u{FFFD}';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabOnDisk {
    chars: String,
}

impl Vocabulary {
    /// Collect every character appearing in the given transcripts.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<char> = texts
            .into_iter()
            .flat_map(|t| t.chars())
            .collect();
        set.sort_unstable();
        set.dedup();
        Self::from_chars(set)
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, FIRST_CHAR + i))
            .collect();
        Vocabulary { chars, index }
    }

    /// Total number of ids including the three special slots.
    pub fn size(&self) -> usize {
        FIRST_CHAR + self.chars.len()
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn id_char(&self, id: usize) -> Option<char> {
        if id >= FIRST_CHAR {
            self.chars.get(id - FIRST_CHAR).copied()
        } else {
            None
        }
    }

    /// Encode text to ids, mapping characters outside the vocabulary to
    /// [`UNK`]. Returns the ids and the number of unknown characters.
    pub fn encode(&self, text: &str) -> (Vec<usize>, usize) {
        let mut unk = 0;
        let ids = text
            .chars()
            .map(|c| {
                self.char_id(c).unwrap_or_else(|| {
                    unk += 1;
                    UNK
                })
            })
            .collect();
        (ids, unk)
    }

    /// Decode ids back to text; special ids other than [`UNK`] are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| {
                if id == UNK {
                    Some(UNK_CHAR)
                } else {
                    self.id_char(id)
                }
            })
            .collect()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabOnDisk {
            chars: self.chars.iter().collect(),
        })
        .expect("vocab serialization")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        let disk: VocabOnDisk = serde_json::from_str(json)?;
        Ok(Self::from_chars(disk.chars.chars().collect()))
    }
}
