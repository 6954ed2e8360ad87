use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Conversation, Speaker, Utterance, Vocabulary};
use crate::{Error, Result};

/// Shape of a generated two-speaker corpus.
///
/// Every utterance draws characters from three pools: a shared pool, the
/// speaker's own pool (role preference) and the conversation topic's pool
/// (topical coherence).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_conversations: usize,
    pub turns_per_conv: usize,
    pub n_topics: usize,
    pub role_vocab_size: usize,
    pub topic_vocab_size: usize,
    pub shared_vocab_size: usize,
    /// Utterance length range in characters, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a character comes from the speaker's pool.
    pub role_weight: f64,
    /// Probability that a character comes from the topic's pool.
    pub topic_weight: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_conversations: 20,
            turns_per_conv: 8,
            n_topics: 2,
            role_vocab_size: 4,
            topic_vocab_size: 4,
            shared_vocab_size: 8,
            min_len: 4,
            max_len: 7,
            role_weight: 0.3,
            topic_weight: 0.3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("turns_per_conv", self.turns_per_conv),
            ("n_topics", self.n_topics),
            ("role_vocab_size", self.role_vocab_size),
            ("topic_vocab_size", self.topic_vocab_size),
            ("shared_vocab_size", self.shared_vocab_size),
            ("min_len", self.min_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.max_len < self.min_len {
            return Err(Error::Config("max_len below min_len".into()));
        }
        let w = [self.role_weight, self.topic_weight];
        if w.iter().any(|p| !(0.0..=1.0).contains(p)) || w.iter().sum::<f64>() > 1.0 {
            return Err(Error::Config(
                "role_weight and topic_weight must be probabilities summing to at most 1".into(),
            ));
        }
        Ok(())
    }
}

/// Disjoint character pools used by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Inventory {
    pub shared: Vec<char>,
    /// Pools for speaker A and speaker B.
    pub roles: [Vec<char>; 2],
    pub topics: Vec<Vec<char>>,
}

impl Inventory {
    fn new(config: &SyntheticConfig) -> Self {
        // CJK unified ideographs, a stand-in for Mandarin character units.
        let mut next = 0x4E00u32;
        let mut take = |n: usize| -> Vec<char> {
            (0..n)
                .map(|_| {
                    let c = char::from_u32(next).expect("CJK block is contiguous");
                    next += 1;
                    c
                })
                .collect()
        };
        let shared = take(config.shared_vocab_size);
        let roles = [take(config.role_vocab_size), take(config.role_vocab_size)];
        let topics = (0..config.n_topics)
            .map(|_| take(config.topic_vocab_size))
            .collect();
        Self {
            shared,
            roles,
            topics,
        }
    }

    pub fn role_pool(&self, speaker: Speaker) -> &[char] {
        &self.roles[speaker as usize]
    }

    /// Every character in a fixed order: shared, roles, topics.
    pub fn all_chars(&self) -> Vec<char> {
        let mut v = self.shared.clone();
        v.extend(self.roles.iter().flatten());
        v.extend(self.topics.iter().flatten());
        v
    }

    /// Position-aligned characters of the role pools, and of the topic pools,
    /// form homophone groups: the `i`-th character of speaker A sounds like
    /// the `i`-th of speaker B, and likewise across topics.
    pub fn homophone_groups(&self) -> Vec<Vec<char>> {
        let mut groups: Vec<Vec<char>> = (0..self.roles[0].len())
            .map(|i| vec![self.roles[0][i], self.roles[1][i]])
            .collect();
        let width = self.topics.first().map_or(0, Vec::len);
        groups.extend((0..width).map(|i| self.topics.iter().map(|t| t[i]).collect()));
        groups
    }

    /// Vocabulary over the inventory, optionally with homophone classes.
    pub fn vocabulary(&self, homophones: bool) -> Vocabulary {
        let v = Vocabulary::new(self.all_chars());
        if homophones {
            v.with_homophones(&self.homophone_groups())
                .expect("inventory characters are in the vocabulary")
        } else {
            v
        }
    }

    /// Topic whose pool contains `c`, if any.
    pub fn topic_of(&self, c: char) -> Option<usize> {
        self.topics.iter().position(|t| t.contains(&c))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub conversations: Vec<Conversation>,
    /// Generating topic of each conversation.
    pub topics: Vec<usize>,
    pub inventory: Inventory,
}

/// Deterministically generate a corpus from `seed`.
pub fn generate_synthetic_corpus(config: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus> {
    config.validate()?;
    let inventory = Inventory::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conversations = Vec::with_capacity(config.n_conversations);
    let mut topics = Vec::with_capacity(config.n_conversations);
    for c in 0..config.n_conversations {
        let topic = rng.random_range(0..config.n_topics);
        let conv_id = format!("conv{c:04}");
        let mut speaker = Speaker::A;
        let mut utterances = Vec::with_capacity(config.turns_per_conv);
        for turn in 1..=config.turns_per_conv {
            let len = rng.random_range(config.min_len..=config.max_len);
            let text: String = (0..len)
                .map(|_| {
                    let u: f64 = rng.random();
                    let pool = if u < config.role_weight {
                        inventory.role_pool(speaker)
                    } else if u < config.role_weight + config.topic_weight {
                        &inventory.topics[topic]
                    } else {
                        &inventory.shared
                    };
                    pool[rng.random_range(0..pool.len())]
                })
                .collect();
            utterances.push(Utterance {
                conv_id: conv_id.clone(),
                turn,
                speaker,
                text,
            });
            speaker = speaker.other();
        }
        conversations.push(Conversation::new(conv_id, utterances)?);
        topics.push(topic);
    }
    Ok(SyntheticCorpus {
        conversations,
        topics,
        inventory,
    })
}
