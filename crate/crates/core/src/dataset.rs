//! Model-ready examples: features, target ids and contexts per utterance.

use crate::corpus::{
    build_contexts, synthesize_features, utterance_seed, ContextPair, Conversation, FeatureConfig,
    FeatureSequence, Vocabulary,
};
use crate::Result;

/// Context windows used when building examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextWindows {
    pub role_len: usize,
    pub topic_len: usize,
}

impl Default for ContextWindows {
    fn default() -> Self {
        Self {
            role_len: 2,
            topic_len: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `conv_id#turn`.
    pub key: String,
    pub text: String,
    pub features: FeatureSequence,
    /// Character ids of the target without boundary symbols.
    pub target: Vec<usize>,
    /// Target wrapped in `<sos>`/`<eos>`, as read by the posterior networks.
    pub target_tokens: Vec<usize>,
    pub contexts: ContextPair,
}

/// One batch per conversation, in corpus order.
///
/// Contexts are built from the reference transcripts of earlier turns.
pub fn build_examples(
    conversations: &[Conversation],
    vocab: &Vocabulary,
    features: &FeatureConfig,
    feature_seed: u64,
    windows: ContextWindows,
) -> Result<Vec<Vec<Example>>> {
    conversations
        .iter()
        .map(|conv| {
            conv.utterances
                .iter()
                .map(|u| {
                    let key = u.key();
                    Ok(Example {
                        features: synthesize_features(
                            &u.text,
                            vocab,
                            features,
                            utterance_seed(feature_seed, &key),
                        )?,
                        target: vocab.encode_chars(&u.text),
                        target_tokens: crate::corpus::tokenize(&u.text, vocab),
                        contexts: build_contexts(
                            conv,
                            u.turn,
                            windows.role_len,
                            windows.topic_len,
                            vocab,
                        )?,
                        text: u.text.clone(),
                        key,
                    })
                })
                .collect()
        })
        .collect()
}
