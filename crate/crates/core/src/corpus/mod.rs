//! Conversation data model, context windows and corpus files.
//!
//! A [`Conversation`] is a sequence of [`Utterance`]s whose speakers strictly
//! alternate. For turn `k`, [`build_contexts`] produces the role context
//! (earlier sentences by the same speaker) and the dialogue context (all
//! earlier sentences), each as recency windows.

mod features;
mod synthetic;
mod vocab;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use features::{synthesize_features, utterance_seed, FeatureConfig, FeatureSequence};
pub use synthetic::{generate_synthetic_corpus, Inventory, SyntheticConfig, SyntheticCorpus};
pub use vocab::{detokenize, tokenize, Vocabulary, EOS, PAD, RESERVED, SOS, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Self {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::A => "A",
            Speaker::B => "B",
        })
    }
}

/// One line of the JSON Lines corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub conv_id: String,
    /// 1-based turn index.
    pub turn: usize,
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn key(&self) -> String {
        format!("{}#{}", self.conv_id, self.turn)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    pub conv_id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    /// Build a conversation, checking turn numbering, speaker alternation and
    /// non-empty text.
    pub fn new(conv_id: impl Into<String>, utterances: Vec<Utterance>) -> Result<Self> {
        let conv_id = conv_id.into();
        for (i, u) in utterances.iter().enumerate() {
            if u.conv_id != conv_id {
                return Err(Error::Input(format!(
                    "utterance of {} inside conversation {conv_id}",
                    u.conv_id
                )));
            }
            if u.turn != i + 1 {
                return Err(Error::Input(format!(
                    "{conv_id}: expected turn {}, found {}",
                    i + 1,
                    u.turn
                )));
            }
            if u.text.is_empty() {
                return Err(Error::Input(format!("{conv_id}#{}: empty text", u.turn)));
            }
            if i > 0 && u.speaker == utterances[i - 1].speaker {
                return Err(Error::Input(format!(
                    "{conv_id}#{}: speakers must alternate",
                    u.turn
                )));
            }
        }
        Ok(Self {
            conv_id,
            utterances,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Token sequences for the role and dialogue contexts of one turn.
///
/// Every constituent sentence is wrapped in exactly one `<sos>` and `<eos>`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContextPair {
    pub role_tokens: Vec<usize>,
    pub dia_tokens: Vec<usize>,
    /// Turns (1-based) contributing to each context, chronological.
    pub role_turns: Vec<usize>,
    pub dia_turns: Vec<usize>,
}

/// Contexts for turn `k` (1-based): the last `role_len` earlier sentences of
/// the same speaker and the last `topic_len` earlier sentences overall.
pub fn build_contexts(
    conv: &Conversation,
    k: usize,
    role_len: usize,
    topic_len: usize,
    vocab: &Vocabulary,
) -> Result<ContextPair> {
    if k == 0 || k > conv.len() {
        return Err(Error::Range(format!(
            "turn {k} outside 1..={} of {}",
            conv.len(),
            conv.conv_id
        )));
    }
    let speaker = conv.utterances[k - 1].speaker;
    let history = &conv.utterances[..k - 1];

    let mut role: Vec<&Utterance> = history
        .iter()
        .rev()
        .filter(|u| u.speaker == speaker)
        .take(role_len)
        .collect();
    role.reverse();
    let dia_start = history.len().saturating_sub(topic_len);
    let dia = &history[dia_start..];

    let encode = |us: &mut dyn Iterator<Item = &Utterance>| {
        us.flat_map(|u| tokenize(&u.text, vocab)).collect::<Vec<_>>()
    };
    Ok(ContextPair {
        role_tokens: encode(&mut role.iter().copied()),
        dia_tokens: encode(&mut dia.iter()),
        role_turns: role.iter().map(|u| u.turn).collect(),
        dia_turns: dia.iter().map(|u| u.turn).collect(),
    })
}

/// Group utterances into conversations, in order of first appearance.
pub fn group_conversations(utterances: Vec<Utterance>) -> Result<Vec<Conversation>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<Utterance>> = Default::default();
    for u in utterances {
        if !groups.contains_key(&u.conv_id) {
            order.push(u.conv_id.clone());
        }
        groups.entry(u.conv_id.clone()).or_default().push(u);
    }
    order
        .into_iter()
        .map(|id| {
            let mut us = groups.remove(&id).unwrap_or_default();
            us.sort_by_key(|u| u.turn);
            Conversation::new(id, us)
        })
        .collect()
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut utterances = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
        utterances.push(u);
    }
    group_conversations(utterances)
}

pub fn write_corpus(path: impl AsRef<Path>, conversations: &[Conversation]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for u in conversations.iter().flat_map(|c| &c.utterances) {
        serde_json::to_writer(&mut out, u)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}
