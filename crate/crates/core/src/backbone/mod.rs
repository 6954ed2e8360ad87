//! Speech encoder, shared text encoder and latent-conditioned decoder.
//!
//! The conformer block follows `s = MHSA(h) + h`, `c = CONV(s)`,
//! `out = FFN(c) + c`: unlike a standard conformer there is no residual
//! around the convolution module, no macaron feed-forward and no final
//! layer norm.

mod conformer;
mod decoder;
pub mod layers;
mod text;

use convasr_tensor::{Session, Var};

use crate::config::FlatConfig;
use crate::corpus::FeatureSequence;
use crate::{Error, Result};

pub use conformer::{ConformerBlock, ConvModule, SpeechEncoder};
pub use decoder::{Decoder, DecoderLayer, Fusion};
pub use text::TextEncoder;

/// Network sizes. All counts are at least 1 and `d_model` is a multiple of `heads`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_conformer: usize,
    pub text_layers: usize,
    pub dec_layers: usize,
    /// Depth of each posterior network's target extractor.
    pub posterior_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub d_z: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Stack frame pairs before the input projection.
    pub subsample: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_conformer: 2,
            text_layers: 2,
            dec_layers: 2,
            posterior_layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            conv_kernel: 7,
            d_z: 16,
            vocab_size: 32,
            feature_dim: 16,
            subsample: true,
        }
    }
}

const KEYS: [&str; 12] = [
    "n_conformer",
    "text_layers",
    "dec_layers",
    "posterior_layers",
    "d_model",
    "heads",
    "d_ff",
    "conv_kernel",
    "d_z",
    "vocab_size",
    "feature_dim",
    "subsample",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_conformer", self.n_conformer),
            ("text_layers", self.text_layers),
            ("dec_layers", self.dec_layers),
            ("posterior_layers", self.posterior_layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("conv_kernel", self.conv_kernel),
            ("d_z", self.d_z),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.vocab_size <= crate::corpus::RESERVED {
            return Err(Error::Config("vocab_size leaves no content symbols".into()));
        }
        Ok(())
    }

    /// Read from flat config entries, starting from the defaults.
    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        let mut c = Self::default();
        c.apply(flat)?;
        Ok(c)
    }

    /// Overwrite fields present in `flat`; other keys are ignored.
    pub fn apply(&mut self, flat: &FlatConfig) -> Result<()> {
        flat.read_into("n_conformer", &mut self.n_conformer)?;
        flat.read_into("text_layers", &mut self.text_layers)?;
        flat.read_into("dec_layers", &mut self.dec_layers)?;
        flat.read_into("posterior_layers", &mut self.posterior_layers)?;
        flat.read_into("d_model", &mut self.d_model)?;
        flat.read_into("heads", &mut self.heads)?;
        flat.read_into("d_ff", &mut self.d_ff)?;
        flat.read_into("conv_kernel", &mut self.conv_kernel)?;
        flat.read_into("d_z", &mut self.d_z)?;
        flat.read_into("vocab_size", &mut self.vocab_size)?;
        flat.read_into("feature_dim", &mut self.feature_dim)?;
        flat.read_into("subsample", &mut self.subsample)?;
        self.validate()
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut f = FlatConfig::default();
        f.set("n_conformer", self.n_conformer);
        f.set("text_layers", self.text_layers);
        f.set("dec_layers", self.dec_layers);
        f.set("posterior_layers", self.posterior_layers);
        f.set("d_model", self.d_model);
        f.set("heads", self.heads);
        f.set("d_ff", self.d_ff);
        f.set("conv_kernel", self.conv_kernel);
        f.set("d_z", self.d_z);
        f.set("vocab_size", self.vocab_size);
        f.set("feature_dim", self.feature_dim);
        f.set("subsample", self.subsample);
        f
    }
}

/// Speech encoder plus decoder: the parameters trained in the first stage.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub encoder: SpeechEncoder,
    pub decoder: Decoder,
}

/// Parameter-name prefixes owned by [`Backbone`].
pub const BACKBONE_PREFIXES: [&str; 2] = ["encoder.", "decoder."];

pub fn is_backbone_param(name: &str) -> bool {
    BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p))
}

impl Backbone {
    pub fn new(init: &mut layers::Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            encoder: SpeechEncoder::new(init, cfg)?,
            decoder: Decoder::new(init, cfg)?,
        })
    }

    pub fn encode(&self, s: &mut Session<'_>, x: &FeatureSequence) -> Result<Var> {
        self.encoder.forward(s, x)
    }
}
