use std::io::{Read, Write};
use std::path::Path;

use convasr_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Vocabulary;
use crate::{Error, Result};

/// Toy acoustic front end: every character is rendered as a run of frames
/// around a prototype vector shared by its sound class.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub frames_per_token: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Seed of the prototype table; fixed for a given corpus.
    pub prototype_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frames_per_token: 2,
            feature_dim: 16,
            noise_std: 0.1,
            prototype_seed: 0x5f3759df,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_token == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "frames_per_token and feature_dim must be at least 1".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("invalid noise_std {}", self.noise_std)));
        }
        Ok(())
    }

    /// Prototype vector of a sound class.
    pub fn prototype(&self, class: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        rng.set_stream(class as u64);
        (0..self.feature_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

/// Frames × feature-dim matrix, at least one frame, all finite.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence(Tensor);

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        let (t, f) = frames.dims2()?;
        if t == 0 || f == 0 {
            return Err(Error::Input(format!("empty feature matrix {t}x{f}")));
        }
        if !frames.is_finite() {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(Self(frames))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.0.row_slice(t)
    }

    /// Cache layout: `u32` T, `u32` F (little endian), then T×F `f32` LE row-major.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 * self.0.len());
        buf.extend((self.frames() as u32).to_le_bytes());
        buf.extend((self.dim() as u32).to_le_bytes());
        for &v in self.0.data() {
            buf.extend((v as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io("<feature cache>", e))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<feature cache>", e))?;
        let word = |i: usize| -> Option<[u8; 4]> { bytes.get(4 * i..4 * i + 4)?.try_into().ok() };
        let truncated = || Error::Input("truncated feature cache".into());
        let t = u32::from_le_bytes(word(0).ok_or_else(truncated)?) as usize;
        let f = u32::from_le_bytes(word(1).ok_or_else(truncated)?) as usize;
        if bytes.len() != 8 + 4 * t * f {
            return Err(Error::Input(format!(
                "feature cache holds {} bytes, expected {}",
                bytes.len(),
                8 + 4 * t * f
            )));
        }
        let data = (0..t * f)
            .map(|i| f32::from_le_bytes(word(2 + i).expect("length checked")) as f64)
            .collect();
        Self::new(Tensor::new(vec![t, f], data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut f)
    }
}

/// Seed for one utterance derived from a corpus seed and the utterance key.
pub fn utterance_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a over the key, folded with the corpus seed.
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Render `text` as `frames_per_token` noisy prototype frames per character.
///
/// Empty text has no frames and is rejected.
pub fn synthesize_features(
    text: &str,
    vocab: &Vocabulary,
    config: &FeatureConfig,
    seed: u64,
) -> Result<FeatureSequence> {
    config.validate()?;
    let ids = vocab.encode_chars(text);
    if ids.is_empty() {
        return Err(Error::Input("cannot synthesise features for empty text".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = config.feature_dim;
    let mut data = Vec::with_capacity(ids.len() * config.frames_per_token * f);
    for &id in &ids {
        let proto = config.prototype(vocab.sound_class(id));
        for _ in 0..config.frames_per_token {
            data.extend(proto.iter().map(|&p| {
                let n: f64 = StandardNormal.sample(&mut rng);
                p + config.noise_std * n
            }));
        }
    }
    FeatureSequence::new(Tensor::new(vec![data.len() / f, f], data)?)
}
