//! Character error rate, ablation evaluation and the context-length sweep.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use convasr_tensor::ParamStore;
use serde::Serialize;
use serde_json::json;

use crate::backbone::ModelConfig;
use crate::corpus::{read_corpus, Conversation, FeatureConfig, Vocabulary};
use crate::dataset::{build_examples, ContextWindows, Example};
use crate::rescoring::{
    attention_rescore, final_score_and_reorder, hypothesis_topics, keep_first_pass, nbest, topic_rescore,
    Hypothesis, TopicModel,
};
use crate::training::{init_stage_two_from, train, Stage, TrainConfig};
use crate::{Error, LatentFlags, Model, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != cb))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn cer(reference: &[char], hypothesis: &[char]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Which system components are active during evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EvalFlags {
    pub role_vae: bool,
    pub topic_vae: bool,
    pub att_res: bool,
    pub topic_res: bool,
}

impl EvalFlags {
    pub const NONE: Self = Self {
        role_vae: false,
        topic_vae: false,
        att_res: false,
        topic_res: false,
    };
    pub const ALL: Self = Self {
        role_vae: true,
        topic_vae: true,
        att_res: true,
        topic_res: true,
    };

    pub fn latent(self) -> LatentFlags {
        LatentFlags {
            role: self.role_vae,
            topic: self.topic_vae,
        }
    }
}

impl FromStr for EvalFlags {
    type Err = Error;

    /// Comma-separated flag names; empty or `none` disables everything.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = Self::NONE;
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "role_vae" => f.role_vae = true,
                "topic_vae" => f.topic_vae = true,
                "att_res" => f.att_res = true,
                "topic_res" => f.topic_res = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown flag {other:?}"))),
            }
        }
        Ok(f)
    }
}

impl fmt::Display for EvalFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.role_vae, "role_vae"),
            (self.topic_vae, "topic_vae"),
            (self.att_res, "att_res"),
            (self.topic_res, "topic_res"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub n_best: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 4,
            n_best: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtteranceScore {
    pub key: String,
    pub reference: String,
    pub hypothesis: String,
    pub edits: usize,
    pub ref_len: usize,
}

impl UtteranceScore {
    pub fn cer(&self) -> f64 {
        self.edits as f64 / self.ref_len as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub flags: EvalFlags,
    pub utterances: Vec<UtteranceScore>,
    pub edits: usize,
    pub ref_chars: usize,
}

impl EvalReport {
    /// Total edits over total reference characters (not a mean of
    /// per-utterance rates).
    pub fn cer(&self) -> f64 {
        if self.ref_chars == 0 {
            0.0
        } else {
            self.edits as f64 / self.ref_chars as f64
        }
    }

    pub fn from_scores(flags: EvalFlags, mut utterances: Vec<UtteranceScore>) -> Self {
        utterances.sort_by(|a, b| a.key.cmp(&b.key));
        Self {
            flags,
            edits: utterances.iter().map(|u| u.edits).sum(),
            ref_chars: utterances.iter().map(|u| u.ref_len).sum(),
            utterances,
        }
    }

    /// `{config, flags, cer}` row for JSON Lines reports.
    pub fn json_row(&self, config: &str) -> serde_json::Value {
        json!({"config": config, "flags": self.flags.to_string(), "cer": self.cer()})
    }
}

/// Human-readable table of evaluation rows.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = format!("{:<24} {:<40} {:>8}\n", "config", "flags", "CER %");
    for (config, r) in rows {
        out.push_str(&format!(
            "{:<24} {:<40} {:>8.2}\n",
            config,
            r.flags.to_string(),
            100.0 * r.cer()
        ));
    }
    out
}

/// Decode one utterance with the components in `flags`, returning the
/// selected hypothesis.
pub fn decode_utterance(
    model: &Model,
    vocab: &Vocabulary,
    example: &Example,
    flags: EvalFlags,
    topics: Option<&TopicModel>,
    decode: &DecodeConfig,
) -> Result<Hypothesis> {
    let prep = model.prepare(&example.features, &example.contexts, flags.latent())?;
    let mut hyps = nbest(model, &prep, vocab, &example.key, decode.beam_width, decode.n_best)?;
    if flags.att_res {
        for h in hyps.iter_mut() {
            h.s_attn = Some(attention_rescore(model, &prep, h, vocab)?);
        }
    }
    match (flags.topic_res, topics) {
        (true, Some(tm)) => {
            let dists = hypothesis_topics(model, tm, &hyps, vocab)?;
            topic_rescore(&mut hyps, &dists, tm)?;
        }
        (true, None) => return Err(Error::Config("topic_res requires a topic model".into())),
        (false, _) => keep_first_pass(&mut hyps),
    }
    let best = if flags.att_res || flags.topic_res {
        final_score_and_reorder(hyps)?.swap_remove(0)
    } else {
        hyps.swap_remove(0)
    };
    Ok(best)
}

/// Decode and score every example.
pub fn run_eval(
    model: &Model,
    vocab: &Vocabulary,
    batches: &[Vec<Example>],
    flags: EvalFlags,
    topics: Option<&TopicModel>,
    decode: &DecodeConfig,
) -> Result<EvalReport> {
    if flags.topic_res && topics.is_none() {
        return Err(Error::Config("topic_res requires a topic model".into()));
    }
    let mut scores = Vec::new();
    for ex in batches.iter().flatten() {
        let best = decode_utterance(model, vocab, ex, flags, topics, decode)?;
        let reference: Vec<char> = ex.text.chars().collect();
        let hypothesis = best.text();
        let hyp_chars: Vec<char> = hypothesis.chars().collect();
        scores.push(UtteranceScore {
            key: ex.key.clone(),
            edits: edit_distance(&reference, &hyp_chars),
            ref_len: reference.len(),
            reference: ex.text.clone(),
            hypothesis,
        });
    }
    Ok(EvalReport::from_scores(flags, scores))
}

/// Which context window a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SweepKind {
    Role,
    Topic,
}

impl SweepKind {
    pub fn windows(self, length: usize) -> ContextWindows {
        match self {
            SweepKind::Role => ContextWindows {
                role_len: length,
                topic_len: 0,
            },
            SweepKind::Topic => ContextWindows {
                role_len: 0,
                topic_len: length,
            },
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepKind::Role => "role_len",
            SweepKind::Topic => "topic_len",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub kind: SweepKind,
    pub length: usize,
    /// Held-out CER averaged over seeds.
    pub cer: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub flags: EvalFlags,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn rows_of(&self, kind: SweepKind) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.kind == kind)
    }

    /// One table per sweep kind: the length column and CER in percent.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (kind, title) in [
            (SweepKind::Role, "role context length j (no topic context)"),
            (SweepKind::Topic, "topic context length k (no role context)"),
        ] {
            if self.rows_of(kind).next().is_none() {
                continue;
            }
            out.push_str(&format!("{title}\n{:>8} {:>8}\n", "length", "CER %"));
            for r in self.rows_of(kind) {
                out.push_str(&format!("{:>8} {:>8.2}\n", r.length, 100.0 * r.cer));
            }
        }
        out
    }

    pub fn json_rows(&self) -> Vec<serde_json::Value> {
        self.rows
            .iter()
            .map(|r| {
                json!({
                    "config": format!("{}={}", r.kind.key(), r.length),
                    "flags": self.flags.to_string(),
                    "cer": r.cer,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub role_lengths: Vec<usize>,
    pub topic_lengths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    /// Stage-1 checkpoint every run starts from.
    pub stage1: PathBuf,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub feature_seed: u64,
    /// Stage-2 training budget per run; `stage` and `seed` are overridden.
    pub train: TrainConfig,
    /// Number of trailing conversations held out for evaluation.
    pub held_out: usize,
    pub decode: DecodeConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.role_lengths.iter().chain(&self.topic_lengths).any(|&l| l == 0) {
            return Err(Error::Config("context lengths must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.model.validate()?;
        self.features.validate()
    }
}

/// Conversations, vocabulary and stage-1 parameters for a sweep.
pub struct SweepData {
    pub train: Vec<Conversation>,
    pub test: Vec<Conversation>,
    pub vocab: Vocabulary,
    pub stage1: ParamStore,
}

impl SweepData {
    pub fn load(config: &SweepConfig) -> Result<Self> {
        let mut conversations = read_corpus(&config.corpus)?;
        let vocab = Vocabulary::load(&config.vocab)?;
        let stage1 = ParamStore::load(&config.stage1).map_err(|e| match e {
            convasr_tensor::TensorError::Io(io) => Error::io(&config.stage1, io),
            other => other.into(),
        })?;
        let (train, test) = split_held_out(&mut conversations, config.held_out)?;
        Ok(Self {
            train,
            test,
            vocab,
            stage1,
        })
    }
}

/// Split off the last `held_out` conversations as a test set.
pub fn split_held_out(
    conversations: &mut Vec<Conversation>,
    held_out: usize,
) -> Result<(Vec<Conversation>, Vec<Conversation>)> {
    if held_out == 0 || held_out >= conversations.len() {
        return Err(Error::Config(format!(
            "cannot hold out {held_out} of {} conversations",
            conversations.len()
        )));
    }
    let test = conversations.split_off(conversations.len() - held_out);
    Ok((std::mem::take(conversations), test))
}

/// Load the sweep inputs from disk and run [`sweep_with_data`].
pub fn context_length_sweep(config: &SweepConfig) -> Result<SweepTable> {
    config.validate()?;
    let data = SweepData::load(config)?;
    sweep_with_data(config, &data, &mut |_| {})
}

/// For every requested length, fine-tune stage 2 from the stage-1
/// parameters with that context window (the other window empty) once per
/// seed, and average the held-out CER of the full latent model.
pub fn sweep_with_data(
    config: &SweepConfig,
    data: &SweepData,
    log: &mut dyn FnMut(&str),
) -> Result<SweepTable> {
    config.validate()?;
    let flags = EvalFlags {
        role_vae: true,
        topic_vae: true,
        ..EvalFlags::NONE
    };
    let mut rows = Vec::new();
    let plan = config
        .role_lengths
        .iter()
        .map(|&l| (SweepKind::Role, l))
        .chain(config.topic_lengths.iter().map(|&l| (SweepKind::Topic, l)));
    for (kind, length) in plan {
        let windows = kind.windows(length);
        let train_set = build_examples(&data.train, &data.vocab, &config.features, config.feature_seed, windows)?;
        let test_set = build_examples(&data.test, &data.vocab, &config.features, config.feature_seed, windows)?;
        let mut per_seed = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let mut model = init_stage_two_from(config.model.clone(), &data.stage1, seed)?;
            let tc = TrainConfig {
                stage: Stage::Two,
                seed,
                ..config.train.clone()
            };
            train(&mut model, &train_set, &tc, log)?;
            let report = run_eval(&model, &data.vocab, &test_set, flags, None, &config.decode)?;
            log(&format!("{}={length} seed={seed} cer={:.4}", kind.key(), report.cer()));
            per_seed.push(report.cer());
        }
        rows.push(SweepRow {
            kind,
            length,
            cer: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
            per_seed,
        });
    }
    Ok(SweepTable { flags, rows })
}
