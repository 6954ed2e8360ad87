use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids preceding the character ids.
pub const RESERVED: usize = 4;

const UNK_CHAR: char = '\u{FFFD}';

/// Character vocabulary.
///
/// Each id also carries a *sound class*: ids sharing a class are
/// acoustically identical when features are synthesised (homophones).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
    sound_class: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    chars: Vec<char>,
    sound_class: Vec<usize>,
}

impl Vocabulary {
    /// Vocabulary over `chars` (deduplicated, order kept); every id is its
    /// own sound class.
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let mut seen = BTreeSet::new();
        let chars: Vec<char> = chars.into_iter().filter(|c| seen.insert(*c)).collect();
        let ids = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + RESERVED))
            .collect();
        let sound_class = (0..chars.len() + RESERVED).collect();
        Self {
            chars,
            ids,
            sound_class,
        }
    }

    /// Sorted set of characters appearing in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::new(set)
    }

    /// Assign sound classes: characters in the same group share one class.
    pub fn with_homophones(mut self, groups: &[Vec<char>]) -> Result<Self> {
        for group in groups {
            let ids = group
                .iter()
                .map(|c| {
                    self.id(*c)
                        .ok_or_else(|| Error::Config(format!("homophone {c:?} not in vocabulary")))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(&first) = ids.first() {
                let class = self.sound_class[first];
                for id in ids {
                    self.sound_class[id] = class;
                }
            }
        }
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED).and_then(|i| self.chars.get(i).copied())
    }

    pub fn sound_class(&self, id: usize) -> usize {
        self.sound_class.get(id).copied().unwrap_or(UNK)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Ids that may be emitted as content (everything but reserved symbols).
    pub fn content_ids(&self) -> std::ops::Range<usize> {
        RESERVED..self.size()
    }

    /// Character ids of `text` without boundary symbols.
    pub fn encode_chars(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c).unwrap_or(UNK)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = VocabFile {
            chars: self.chars.clone(),
            sound_class: self.sound_class.clone(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: VocabFile = serde_json::from_str(&text)?;
        let mut v = Self::new(file.chars);
        if file.sound_class.len() != v.size() {
            return Err(Error::Input(format!(
                "vocabulary file has {} sound classes for {} ids",
                file.sound_class.len(),
                v.size()
            )));
        }
        v.sound_class = file.sound_class;
        Ok(v)
    }
}

/// `<sos>` + character ids + `<eos>`; unknown characters map to `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(SOS);
    out.extend(vocab.encode_chars(text));
    out.push(EOS);
    out
}

/// Inverse of [`tokenize`]: drops `<pad>`/`<sos>`/`<eos>`, renders `<unk>` as U+FFFD.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&i| !matches!(i, PAD | SOS | EOS))
        .map(|&i| vocab.char_of(i).unwrap_or(UNK_CHAR))
        .collect()
}
