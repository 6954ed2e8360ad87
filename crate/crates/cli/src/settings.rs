//! Everything a run can configure, read from one flat `key = value` file.

use std::path::Path;
use std::str::FromStr;

use convasr_core::backbone::ModelConfig;
use convasr_core::config::FlatConfig;
use convasr_core::corpus::{FeatureConfig, SyntheticConfig};
use convasr_core::dataset::ContextWindows;
use convasr_core::eval::DecodeConfig;
use convasr_core::rescoring::TopicFitConfig;
use convasr_core::training::TrainConfig;
use convasr_core::{Error, Result};

const KEYS: &[&str] = &[
    "n_conversations",
    "turns_per_conv",
    "n_topics",
    "role_vocab_size",
    "topic_vocab_size",
    "shared_vocab_size",
    "min_len",
    "max_len",
    "role_weight",
    "topic_weight",
    "frames_per_token",
    "noise_std",
    "steps",
    "lr",
    "clip",
    "warmup_steps",
    "log_interval",
    "role_len",
    "topic_len",
    "beam_width",
    "n_best",
    "topics",
    "keywords",
    "tau",
    "kmeans_restarts",
    "kmeans_iters",
    "held_out",
    "role_lengths",
    "topic_lengths",
    "seeds",
];

#[derive(Clone, Debug)]
pub struct Settings {
    pub synthetic: SyntheticConfig,
    pub features: FeatureConfig,
    /// `vocab_size` is replaced by the vocabulary actually loaded.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub windows: ContextWindows,
    pub decode: DecodeConfig,
    pub topics: TopicFitConfig,
    /// Trailing conversations kept out of training; 0 keeps everything.
    pub held_out: usize,
    pub role_lengths: Vec<usize>,
    pub topic_lengths: Vec<usize>,
    /// Sweep seeds; empty means the CLI seed alone.
    pub seeds: Vec<u64>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            windows: ContextWindows::default(),
            decode: DecodeConfig::default(),
            topics: TopicFitConfig::default(),
            held_out: 0,
            role_lengths: vec![1, 2, 3],
            topic_lengths: vec![1, 2, 3],
            seeds: Vec::new(),
        }
    }
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_flat(&FlatConfig::load(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        let known: Vec<&str> = KEYS
            .iter()
            .chain(ModelConfig::keys())
            .copied()
            .filter(|k| *k != "vocab_size")
            .collect();
        flat.expect_keys(&known)?;
        let mut s = Self::default();
        let sc = &mut s.synthetic;
        flat.read_into("n_conversations", &mut sc.n_conversations)?;
        flat.read_into("turns_per_conv", &mut sc.turns_per_conv)?;
        flat.read_into("n_topics", &mut sc.n_topics)?;
        flat.read_into("role_vocab_size", &mut sc.role_vocab_size)?;
        flat.read_into("topic_vocab_size", &mut sc.topic_vocab_size)?;
        flat.read_into("shared_vocab_size", &mut sc.shared_vocab_size)?;
        flat.read_into("min_len", &mut sc.min_len)?;
        flat.read_into("max_len", &mut sc.max_len)?;
        flat.read_into("role_weight", &mut sc.role_weight)?;
        flat.read_into("topic_weight", &mut sc.topic_weight)?;
        flat.read_into("frames_per_token", &mut s.features.frames_per_token)?;
        flat.read_into("feature_dim", &mut s.features.feature_dim)?;
        flat.read_into("noise_std", &mut s.features.noise_std)?;
        // vocab_size is checked once the vocabulary is known
        let mut model_flat = flat.clone();
        model_flat.set("vocab_size", ModelConfig::default().vocab_size);
        s.model.apply(&model_flat)?;
        s.model.feature_dim = s.features.feature_dim;
        flat.read_into("steps", &mut s.train.steps)?;
        flat.read_into("lr", &mut s.train.lr)?;
        flat.read_into("clip", &mut s.train.clip)?;
        flat.read_into("warmup_steps", &mut s.train.warmup_steps)?;
        flat.read_into("log_interval", &mut s.train.log_interval)?;
        flat.read_into("role_len", &mut s.windows.role_len)?;
        flat.read_into("topic_len", &mut s.windows.topic_len)?;
        flat.read_into("beam_width", &mut s.decode.beam_width)?;
        flat.read_into("n_best", &mut s.decode.n_best)?;
        flat.read_into("topics", &mut s.topics.m)?;
        flat.read_into("keywords", &mut s.topics.j)?;
        flat.read_into("tau", &mut s.topics.tau)?;
        flat.read_into("kmeans_restarts", &mut s.topics.restarts)?;
        flat.read_into("kmeans_iters", &mut s.topics.max_iter)?;
        flat.read_into("held_out", &mut s.held_out)?;
        read_list(flat, "role_lengths", &mut s.role_lengths)?;
        read_list(flat, "topic_lengths", &mut s.topic_lengths)?;
        read_list(flat, "seeds", &mut s.seeds)?;
        s.synthetic.validate()?;
        s.features.validate()?;
        Ok(s)
    }

    pub fn model_for_vocab(&self, vocab_size: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            vocab_size,
            ..self.model.clone()
        };
        c.validate()?;
        Ok(c)
    }
}

/// Comma-separated list value.
fn read_list<T: FromStr>(flat: &FlatConfig, key: &str, slot: &mut Vec<T>) -> Result<()> {
    if let Some(raw) = flat.get::<String>(key)? {
        *slot = raw
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
            })
            .collect::<Result<_>>()?;
    }
    Ok(())
}
