use std::cmp::Ordering;

use crate::corpus::{EOS, RESERVED};
use crate::{Error, Model, Prepared, Result};

/// A complete first-pass hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Content ids, without boundary symbols.
    pub ids: Vec<usize>,
    /// Log-probability of each id given its prefix.
    pub scores: Vec<f64>,
    /// Log-probability of `<eos>` after the last id.
    pub eos_score: f64,
}

impl BeamHypothesis {
    /// Total first-pass log-probability, end symbol included.
    pub fn total(&self) -> f64 {
        self.scores.iter().sum::<f64>() + self.eos_score
    }
}

#[derive(Clone, Debug)]
struct Partial {
    ids: Vec<usize>,
    scores: Vec<f64>,
    total: f64,
}

/// Source of next-token log-probabilities for a prefix of content ids.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// A model together with one utterance's prepared inputs.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub prep: &'a Prepared,
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.model.next_log_probs(self.prep, prefix)
    }
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Beam search over content symbols.
///
/// Each step expands every running hypothesis by every content symbol and,
/// once it holds at least one symbol, by `<eos>`; the `beam_width` best
/// expansions survive and those ending in `<eos>` are set aside as complete.
/// After `max_len` symbols only `<eos>` may follow. Returns the `n` best
/// complete hypotheses by [`BeamHypothesis::total`], best first.
pub fn beam_search_nbest(
    scorer: &dyn StepScorer,
    beam_width: usize,
    n: usize,
    max_len: usize,
) -> Result<Vec<BeamHypothesis>> {
    if n == 0 || beam_width < n {
        return Err(Error::Config(format!(
            "need beam_width >= n >= 1, got beam_width {beam_width}, n {n}"
        )));
    }
    let vocab = scorer.vocab_size();
    let mut running = vec![Partial {
        ids: Vec::new(),
        scores: Vec::new(),
        total: 0.0,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for step in 0..=max_len {
        // (source index, symbol, log-prob, new total)
        let mut expansions: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (i, p) in running.iter().enumerate() {
            let lp = scorer.next_log_probs(&p.ids)?;
            if step < max_len {
                for c in RESERVED..vocab {
                    expansions.push((i, c, lp[c], p.total + lp[c]));
                }
            }
            if step > 0 {
                expansions.push((i, EOS, lp[EOS], p.total + lp[EOS]));
            }
        }
        // Stable sort: ties keep generation order.
        expansions.sort_by(|a, b| by_score_desc(a.3, b.3));
        expansions.truncate(beam_width);
        let mut next = Vec::with_capacity(expansions.len());
        for (i, c, lp, total) in expansions {
            let src = &running[i];
            if c == EOS {
                finished.push(BeamHypothesis {
                    ids: src.ids.clone(),
                    scores: src.scores.clone(),
                    eos_score: lp,
                });
            } else {
                let mut ids = src.ids.clone();
                ids.push(c);
                let mut scores = src.scores.clone();
                scores.push(lp);
                next.push(Partial { ids, scores, total });
            }
        }
        running = next;
        if running.is_empty() {
            break;
        }
    }
    if finished.is_empty() {
        return Err(Error::Length(format!(
            "no hypothesis ended within {max_len} symbols"
        )));
    }
    finished.sort_by(|a, b| by_score_desc(a.total(), b.total()));
    finished.truncate(n);
    Ok(finished)
}

/// Highest-probability allowed symbol at each step until `<eos>`.
pub fn greedy_decode(scorer: &dyn StepScorer, max_len: usize) -> Result<BeamHypothesis> {
    let vocab = scorer.vocab_size();
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    loop {
        let lp = scorer.next_log_probs(&ids)?;
        let mut best: Option<(usize, f64)> = None;
        let allowed = (RESERVED..vocab)
            .filter(|_| ids.len() < max_len)
            .chain((!ids.is_empty()).then_some(EOS));
        for c in allowed {
            if best.is_none_or(|(_, s)| lp[c] > s) {
                best = Some((c, lp[c]));
            }
        }
        match best {
            Some((EOS, s)) => {
                return Ok(BeamHypothesis {
                    ids,
                    scores,
                    eos_score: s,
                })
            }
            Some((c, s)) => {
                ids.push(c);
                scores.push(s);
            }
            None => {
                return Err(Error::Length(format!(
                    "no hypothesis ended within {max_len} symbols"
                )))
            }
        }
    }
}

/// Default length limit for an utterance with `enc_frames` encoder frames.
pub fn default_max_len(enc_frames: usize) -> usize {
    2 * enc_frames + 2
}
