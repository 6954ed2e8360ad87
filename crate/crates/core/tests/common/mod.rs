//! Oracles and fixtures shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use convasr_core::backbone::ModelConfig;
use convasr_core::corpus::{ContextPair, FeatureSequence, EOS, RESERVED, SOS};
use convasr_core::rescoring::{Hypothesis, TopicDistribution, TopicModel, END_TOKEN};
use convasr_core::{LatentFlags, Model, Prepared};
use convasr_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_config(content_symbols: usize) -> ModelConfig {
    ModelConfig {
        n_conformer: 1,
        text_layers: 1,
        dec_layers: 1,
        posterior_layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 12,
        conv_kernel: 3,
        d_z: 3,
        vocab_size: RESERVED + content_symbols,
        feature_dim: 3,
        subsample: true,
    }
}

pub fn random_features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureSequence {
    let data = (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureSequence::new(Tensor::new(vec![frames, dim], data).unwrap()).unwrap()
}

/// A random model with sharpened output logits and one prepared utterance.
pub fn random_prepared(content_symbols: usize, seed: u64) -> (Model, Prepared) {
    let mut model = Model::new(toy_config(content_symbols), seed).unwrap();
    let id = model.params.id("decoder.output.w").unwrap();
    for w in model.params.get_mut(id).data_mut() {
        *w *= 8.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = random_features(&mut rng, 6, model.config.feature_dim);
    let contexts = ContextPair {
        role_tokens: vec![SOS, RESERVED, EOS],
        dia_tokens: vec![SOS, RESERVED + 1, RESERVED, EOS],
        role_turns: vec![1],
        dia_turns: vec![1],
    };
    let prep = model.prepare(&x, &contexts, LatentFlags::ALL).unwrap();
    (model, prep)
}

/// Every content sequence of length `1..=max_len` scored by one
/// teacher-forced pass each: ids → total log-probability including `<eos>`.
pub fn exhaustive_sequences(model: &Model, prep: &Prepared, max_len: usize) -> BTreeMap<Vec<usize>, f64> {
    let symbols: Vec<usize> = (RESERVED..model.config.vocab_size).collect();
    let mut out = BTreeMap::new();
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            for &c in &symbols {
                let mut seq = prefix.clone();
                seq.push(c);
                let (scores, eos) = model.score_tokens(prep, &seq).unwrap();
                out.insert(seq.clone(), scores.iter().sum::<f64>() + eos);
                next.push(seq);
            }
        }
        frontier = next;
    }
    out
}

/// Straight-line topic rescoring and final ranking of one n-best list.
///
/// Returns `(rank, s_sen)` pairs, best first.
pub fn rescoring_oracle(
    hyps: &[Hypothesis],
    dists: &[TopicDistribution],
    topics: &TopicModel,
    topic_res: bool,
) -> Vec<(usize, f64)> {
    let mut c = f64::INFINITY;
    for h in hyps {
        for &s in &h.s_old {
            if s < c {
                c = s;
            }
        }
    }
    let mut rows: Vec<(usize, f64)> = Vec::new();
    for (n, h) in hyps.iter().enumerate() {
        let mut s_sen = 0.0;
        for t in 0..h.tokens.len() {
            let mut s_new = h.s_old[t];
            if topic_res {
                for (b, list) in topics.keywords.iter().enumerate() {
                    if list.contains(&h.tokens[t]) {
                        s_new = (h.s_old[t] - c) * (1.0 + dists[n].0[b]) + c;
                    }
                }
            }
            let s_attn = match &h.s_attn {
                Some(a) => a[t],
                None => 0.0,
            };
            s_sen += s_attn + s_new;
        }
        rows.push((h.rank, s_sen));
    }
    // insertion sort: higher score first, lower rank on ties
    for i in 1..rows.len() {
        let mut j = i;
        while j > 0 {
            let (ra, sa) = rows[j - 1];
            let (rb, sb) = rows[j];
            if sb > sa || (sb == sa && rb < ra) {
                rows.swap(j - 1, j);
                j -= 1;
            } else {
                break;
            }
        }
    }
    rows
}

/// Edit distance by exhaustive alignment search, memoised on suffix pairs.
pub fn edit_distance_oracle(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let sub = go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
        let del = go(&a[1..], b, memo) + 1;
        let ins = go(a, &b[1..], memo) + 1;
        let best = sub.min(del).min(ins);
        memo.insert((a.len(), b.len()), best);
        best
    }
    go(a, b, &mut BTreeMap::new())
}

pub fn hyp(rank: usize, tokens: &[&str], s_old: &[f64]) -> Hypothesis {
    Hypothesis {
        utt_id: "u".into(),
        rank,
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
        s_old: s_old.to_vec(),
        s_attn: None,
        s_new: None,
        s_final: None,
        s_sen: None,
    }
}

pub fn two_topics() -> TopicModel {
    TopicModel {
        m: 2,
        tau: 5.0,
        keywords: vec![vec!["a".into(), "b".into()], vec!["c".into()]],
        centroids: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        center: Vec::new(),
    }
}

/// Random n-best list over six words with matching topic distributions.
pub fn random_list(rng: &mut ChaCha8Rng) -> (Vec<Hypothesis>, Vec<TopicDistribution>) {
    let words = ["a", "b", "c", "d", "e", "f"];
    let n = rng.random_range(1..=6);
    let mut hyps: Vec<Hypothesis> = Vec::new();
    let mut dists: Vec<TopicDistribution> = Vec::new();
    for rank in 1..=n {
        let len = rng.random_range(1..=5);
        let mut tokens: Vec<&str> = (0..len).map(|_| words[rng.random_range(0..words.len())]).collect();
        tokens.push(END_TOKEN);
        let s_old: Vec<f64> = tokens.iter().map(|_| -rng.random_range(0.0..4.0)).collect();
        let mut h = hyp(rank, &tokens, &s_old);
        if rng.random_bool(0.7) {
            h.s_attn = Some(tokens.iter().map(|_| -rng.random_range(0.0..4.0)).collect());
        }
        // occasional exact duplicates exercise the tie-break
        if rank > 1 && rng.random_bool(0.15) {
            h = Hypothesis { rank, ..hyps[rank - 2].clone() };
        }
        let p: f64 = rng.random();
        let d = TopicDistribution(vec![p, 1.0 - p]);
        dists.push(if rank > 1 && h.tokens == hyps[rank - 2].tokens { dists[rank - 2].clone() } else { d });
        hyps.push(h);
    }
    (hyps, dists)
}
