//! N-best generation and second-pass rescoring.
//!
//! A [`Hypothesis`] holds one scored token per character plus a final
//! [`END_TOKEN`] carrying the end-symbol log-probability, so that the summed
//! first-pass scores equal the beam-search total.

mod beam;
mod topic;

use std::cmp::Ordering;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use beam::{beam_search_nbest, default_max_len, greedy_decode, BeamHypothesis, ModelScorer, StepScorer};
pub use topic::{select_keywords, spherical_kmeans, TopicDistribution, TopicFitConfig, TopicModel};

use crate::corpus::{Conversation, Vocabulary, EOS, SOS};
use crate::{Error, Model, Prepared, Result};

/// Token text of the end symbol in hypothesis files.
pub const END_TOKEN: &str = "</s>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub utt_id: String,
    /// First-pass rank, 1 = best.
    pub rank: usize,
    pub tokens: Vec<String>,
    pub s_old: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_attn: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_new: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_final: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_sen: Option<f64>,
}

impl Hypothesis {
    pub fn from_beam(utt_id: &str, rank: usize, beam: &BeamHypothesis, vocab: &Vocabulary) -> Result<Self> {
        let mut tokens = beam
            .ids
            .iter()
            .map(|&id| {
                vocab
                    .char_of(id)
                    .map(String::from)
                    .ok_or_else(|| Error::Input(format!("id {id} is not a character")))
            })
            .collect::<Result<Vec<_>>>()?;
        tokens.push(END_TOKEN.to_string());
        let mut s_old = beam.scores.clone();
        s_old.push(beam.eos_score);
        Ok(Self {
            utt_id: utt_id.to_string(),
            rank,
            tokens,
            s_old,
            s_attn: None,
            s_new: None,
            s_final: None,
            s_sen: None,
        })
    }

    /// Transcript without the end token.
    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .filter(|t| *t != END_TOKEN)
            .map(String::as_str)
            .collect()
    }

    /// Character ids of the transcript, end token excluded.
    pub fn ids(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        self.tokens
            .iter()
            .filter(|t| *t != END_TOKEN)
            .map(|t| {
                let mut chars = t.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => vocab
                        .id(c)
                        .ok_or_else(|| Error::Input(format!("token {t:?} not in vocabulary"))),
                    _ => Err(Error::Input(format!("token {t:?} is not a single character"))),
                }
            })
            .collect()
    }

    fn check_aligned(&self, name: &str, scores: &[f64]) -> Result<()> {
        if scores.len() != self.tokens.len() {
            return Err(Error::Contract(format!(
                "{} rank {}: {name} has {} scores for {} tokens",
                self.utt_id,
                self.rank,
                scores.len(),
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

/// First-pass n-best list for one utterance, ranks starting at 1.
pub fn nbest(
    model: &Model,
    prep: &Prepared,
    vocab: &Vocabulary,
    utt_id: &str,
    beam_width: usize,
    n: usize,
) -> Result<Vec<Hypothesis>> {
    let max_len = default_max_len(prep.enc.shape()[0]);
    beam_search_nbest(&ModelScorer { model, prep }, beam_width, n, max_len)?
        .iter()
        .enumerate()
        .map(|(i, b)| Hypothesis::from_beam(utt_id, i + 1, b, vocab))
        .collect()
}

/// Teacher-forced log-probability of every hypothesis token under the
/// decoder, end token included.
pub fn attention_rescore(
    model: &Model,
    prep: &Prepared,
    hyp: &Hypothesis,
    vocab: &Vocabulary,
) -> Result<Vec<f64>> {
    let ids = hyp.ids(vocab)?;
    let (mut scores, eos) = model.score_tokens(prep, &ids)?;
    if hyp.tokens.last().map(String::as_str) == Some(END_TOKEN) {
        scores.push(eos);
    }
    Ok(scores)
}

/// `s_old · (1 + d_b)` when `word` is a keyword of topic `b`, else `s_old`.
pub fn rescore_word(s_old: f64, word: &str, d: &TopicDistribution, topics: &TopicModel) -> f64 {
    match topics.topic_of(word) {
        Some(b) => s_old * (1.0 + d.get(b)),
        None => s_old,
    }
}

/// Topic rescoring of one utterance's n-best list; sets `s_new`.
///
/// Log-probabilities are negative, so the multiplier is applied to scores
/// shifted by the smallest score `c` in the list and the shift is undone
/// afterwards: keyword scores become `(s_old - c)(1 + d_b) + c` and all
/// other scores are kept. `dists[i]` is the topic distribution of `hyps[i]`.
pub fn topic_rescore(hyps: &mut [Hypothesis], dists: &[TopicDistribution], topics: &TopicModel) -> Result<()> {
    if hyps.len() != dists.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses with {} topic distributions",
            hyps.len(),
            dists.len()
        )));
    }
    for h in hyps.iter() {
        h.check_aligned("s_old", &h.s_old)?;
    }
    let c = hyps
        .iter()
        .flat_map(|h| h.s_old.iter().copied())
        .fold(f64::INFINITY, f64::min);
    for (h, d) in hyps.iter_mut().zip(dists) {
        let s_new = h
            .tokens
            .iter()
            .zip(&h.s_old)
            .map(|(w, &s)| match topics.topic_of(w) {
                Some(_) => rescore_word(s - c, w, d, topics) + c,
                None => s,
            })
            .collect();
        h.s_new = Some(s_new);
    }
    Ok(())
}

/// Set `s_new = s_old` for every hypothesis (topic rescoring disabled).
pub fn keep_first_pass(hyps: &mut [Hypothesis]) {
    for h in hyps {
        h.s_new = Some(h.s_old.clone());
    }
}

/// `s_final = s_attn + s_new` per token and `s_sen = Σ s_final`; returns the
/// list sorted by descending `s_sen`, ties going to the lower first-pass rank.
///
/// A hypothesis without `s_attn` contributes zero attention score.
pub fn final_score_and_reorder(mut hyps: Vec<Hypothesis>) -> Result<Vec<Hypothesis>> {
    for h in hyps.iter_mut() {
        let s_new = h
            .s_new
            .clone()
            .ok_or_else(|| Error::Contract(format!("{} rank {}: missing s_new", h.utt_id, h.rank)))?;
        h.check_aligned("s_new", &s_new)?;
        let s_final: Vec<f64> = match &h.s_attn {
            Some(a) => {
                h.check_aligned("s_attn", a)?;
                a.iter().zip(&s_new).map(|(a, n)| a + n).collect()
            }
            None => s_new,
        };
        h.s_sen = Some(s_final.iter().sum());
        h.s_final = Some(s_final);
    }
    hyps.sort_by(|a, b| {
        b.s_sen
            .partial_cmp(&a.s_sen)
            .unwrap_or(Ordering::Equal)
            .then(a.rank.cmp(&b.rank))
    });
    Ok(hyps)
}

pub fn write_nbest(w: &mut impl Write, hyps: &[Hypothesis]) -> Result<()> {
    for h in hyps {
        serde_json::to_writer(&mut *w, h)?;
        writeln!(w).map_err(|e| Error::io("<n-best>", e))?;
    }
    Ok(())
}

pub fn save_nbest(path: impl AsRef<Path>, hyps: &[Hypothesis]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    write_nbest(&mut f, hyps)?;
    f.flush().map_err(|e| Error::io(&path, e))
}

/// Read a JSON Lines n-best file; blank lines are skipped.
pub fn load_nbest(path: impl AsRef<Path>) -> Result<Vec<Hypothesis>> {
    let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let h: Hypothesis = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{} line {}: {e}", path.as_ref().display(), i + 1)))?;
        h.check_aligned("s_old", &h.s_old)?;
        out.push(h);
    }
    Ok(out)
}

/// Group hypotheses by utterance, keeping first-appearance order.
pub fn group_by_utterance(hyps: Vec<Hypothesis>) -> Vec<Vec<Hypothesis>> {
    let mut groups: Vec<Vec<Hypothesis>> = Vec::new();
    for h in hyps {
        match groups.iter_mut().find(|g| g[0].utt_id == h.utt_id) {
            Some(g) => g.push(h),
            None => groups.push(vec![h]),
        }
    }
    groups
}

/// Text-encoder embedding of a sentence given as character ids, wrapped in
/// boundary symbols; the empty sentence embeds to zeros.
pub fn sentence_embedding(model: &Model, ids: &[usize]) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Ok(vec![0.0; model.config.d_model]);
    }
    let tokens: Vec<usize> = std::iter::once(SOS)
        .chain(ids.iter().copied())
        .chain(std::iter::once(EOS))
        .collect();
    model.embed_tokens(&tokens)
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Topic-model input for a sentence: its unit-length bag of characters
/// followed by its unit-length text-encoder embedding. The empty sentence
/// maps to zeros.
pub fn sentence_features(model: &Model, ids: &[usize]) -> Result<Vec<f64>> {
    let mut bow = vec![0.0; model.config.vocab_size];
    for &id in ids {
        let slot = bow
            .get_mut(id)
            .ok_or_else(|| Error::Input(format!("id {id} outside the vocabulary")))?;
        *slot += 1.0;
    }
    let mut out = unit(bow);
    out.extend(unit(sentence_embedding(model, ids)?));
    Ok(out)
}

/// Mean of the sentence features of a conversation.
pub fn conversation_features(model: &Model, conversation: &Conversation, vocab: &Vocabulary) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; model.config.vocab_size + model.config.d_model];
    for u in &conversation.utterances {
        let f = sentence_features(model, &vocab.encode_chars(&u.text))?;
        sum.iter_mut().zip(&f).for_each(|(s, x)| *s += x);
    }
    let n = conversation.utterances.len().max(1) as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Topic distribution of each hypothesis under `topics`.
pub fn hypothesis_topics(
    model: &Model,
    topics: &TopicModel,
    hyps: &[Hypothesis],
    vocab: &Vocabulary,
) -> Result<Vec<TopicDistribution>> {
    hyps.iter()
        .map(|h| Ok(topics.infer(&sentence_features(model, &h.ids(vocab)?)?)))
        .collect()
}

/// Fit a topic model on training conversations, words being characters.
pub fn fit_topic_model(
    model: &Model,
    conversations: &[Conversation],
    vocab: &Vocabulary,
    config: &TopicFitConfig,
) -> Result<TopicModel> {
    let docs: Vec<Vec<String>> = conversations
        .iter()
        .map(|c| {
            c.utterances
                .iter()
                .flat_map(|u| u.text.chars().map(String::from))
                .collect()
        })
        .collect();
    let features = conversations
        .iter()
        .map(|c| conversation_features(model, c, vocab))
        .collect::<Result<Vec<_>>>()?;
    TopicModel::fit(&docs, &features, config)
}
