//! The full network: backbone, shared text encoder and latent branches,
//! with their parameters in one store.

use std::path::Path;

use convasr_tensor::{ParamStore, Session, Tensor, Var};

use crate::backbone::layers::Init;
use crate::backbone::{is_backbone_param, Backbone, ModelConfig, TextEncoder};
use crate::corpus::{ContextPair, FeatureSequence, SOS};
use crate::lvm::{Branch, GaussianParams, GaussianVars, Lvm};
use crate::{Error, Result};

/// Which latent branches condition the decoder. A disabled branch feeds
/// the zero vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentFlags {
    pub role: bool,
    pub topic: bool,
}

impl LatentFlags {
    pub const ALL: Self = Self {
        role: true,
        topic: true,
    };
    pub const NONE: Self = Self {
        role: false,
        topic: false,
    };

    pub fn enabled(self, b: Branch) -> bool {
        match b {
            Branch::Role => self.role,
            Branch::Topic => self.topic,
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub text: TextEncoder,
    pub lvm: Lvm,
}

/// Everything the decoder needs for one utterance at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub enc: Tensor,
    pub z_role: Tensor,
    pub z_dia: Tensor,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let backbone = Backbone::new(&mut init, &config)?;
        let text = TextEncoder::new(&mut init, &config)?;
        let lvm = Lvm::new(&mut init, &config)?;
        Ok(Self {
            config,
            params,
            backbone,
            text,
            lvm,
        })
    }

    /// Overwrite parameters with every entry of `source`, which must all
    /// exist here with matching shapes.
    pub fn assign_from(&mut self, source: &ParamStore) -> Result<()> {
        for (_, name, t) in source.iter() {
            self.params.assign(name, t)?;
        }
        Ok(())
    }

    /// Model with all parameters read from a full checkpoint.
    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let stored = ParamStore::load(path).map_err(|e| io_or_tensor(path, e))?;
        let mut model = Self::new(config, 0)?;
        if stored.len() != model.params.len() {
            let missing: Vec<&str> = model
                .params
                .iter()
                .map(|(_, n, _)| n)
                .filter(|n| stored.id(n).is_none())
                .take(3)
                .collect();
            return Err(Error::Config(format!(
                "checkpoint {} has {} tensors, model has {} (missing e.g. {missing:?})",
                path.display(),
                stored.len(),
                model.params.len()
            )));
        }
        model.assign_from(&stored)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path).map_err(|e| io_or_tensor(path, e))
    }

    /// Only the speech encoder and decoder parameters.
    pub fn backbone_params(&self) -> ParamStore {
        self.params.filtered(is_backbone_param)
    }

    /// Run the speech encoder.
    pub fn encode(&self, x: &FeatureSequence) -> Result<Tensor> {
        let mut s = Session::inference(&self.params);
        let enc = self.backbone.encode(&mut s, x)?;
        Ok(s.graph.value(enc).clone())
    }

    /// Mean-pooled text-encoder output for a token sequence; empty input
    /// gives the zero vector.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut s = Session::inference(&self.params);
        let h = self.text.encode(&mut s, tokens)?;
        Ok(s.graph.value(h).data().to_vec())
    }

    /// Prior distributions for both branches given the pooled contexts.
    pub fn priors(&self, contexts: &ContextPair) -> Result<(GaussianParams, GaussianParams)> {
        let mut s = Session::inference(&self.params);
        let (r, d) = self.prior_vars(&mut s, contexts)?;
        Ok((GaussianParams::from_vars(&s, &r), GaussianParams::from_vars(&s, &d)))
    }

    pub fn prior_vars(
        &self,
        s: &mut Session<'_>,
        contexts: &ContextPair,
    ) -> Result<(GaussianVars, GaussianVars)> {
        let h_role = self.text.encode(s, &contexts.role_tokens)?;
        let h_dia = self.text.encode(s, &contexts.dia_tokens)?;
        let r = self.lvm.role.prior.forward(s, h_role)?;
        let d = self.lvm.topic.prior.forward(s, h_dia)?;
        Ok((r, d))
    }

    /// Encoder states plus prior-mean latents; never looks at the target.
    pub fn prepare(
        &self,
        x: &FeatureSequence,
        contexts: &ContextPair,
        flags: LatentFlags,
    ) -> Result<Prepared> {
        let enc = self.encode(x)?;
        let zeros = Tensor::zeros(&[1, self.config.d_z]);
        let (z_role, z_dia) = if flags.role || flags.topic {
            let (r, d) = self.priors(contexts)?;
            let pick = |on: bool, p: GaussianParams| {
                if on {
                    Tensor::row(p.mu)
                } else {
                    zeros.clone()
                }
            };
            (pick(flags.role, r), pick(flags.topic, d))
        } else {
            (zeros.clone(), zeros)
        };
        Ok(Prepared { enc, z_role, z_dia })
    }

    /// Decoder log-probabilities `[inputs.len(), vocab]` on a session.
    pub fn decoder_log_probs(
        &self,
        s: &mut Session<'_>,
        prep: &Prepared,
        inputs: &[usize],
    ) -> Result<Var> {
        let enc = s.graph.constant(prep.enc.clone());
        let zr = s.graph.constant(prep.z_role.clone());
        let zd = s.graph.constant(prep.z_dia.clone());
        self.backbone.decoder.log_probs(s, enc, inputs, zr, zd)
    }

    /// Distribution of the token following `<sos> prefix`.
    pub fn decode_step(&self, prep: &Prepared, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self
            .next_log_probs(prep, prefix)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Log form of [`Model::decode_step`].
    pub fn next_log_probs(&self, prep: &Prepared, prefix: &[usize]) -> Result<Vec<f64>> {
        let inputs: Vec<usize> = std::iter::once(SOS).chain(prefix.iter().copied()).collect();
        let mut s = Session::inference(&self.params);
        let lp = self.decoder_log_probs(&mut s, prep, &inputs)?;
        let t = s.graph.value(lp);
        Ok(t.row_slice(inputs.len() - 1).to_vec())
    }

    /// Teacher-forced log-probability of each of `tokens` followed by the
    /// log-probability of the end symbol after them.
    pub fn score_tokens(&self, prep: &Prepared, tokens: &[usize]) -> Result<(Vec<f64>, f64)> {
        let inputs: Vec<usize> = std::iter::once(SOS).chain(tokens.iter().copied()).collect();
        let mut s = Session::inference(&self.params);
        let lp = self.decoder_log_probs(&mut s, prep, &inputs)?;
        let t = s.graph.value(lp);
        let per_token = tokens
            .iter()
            .enumerate()
            .map(|(i, &y)| t.row_slice(i)[y])
            .collect();
        Ok((per_token, t.row_slice(tokens.len())[crate::corpus::EOS]))
    }
}

fn io_or_tensor(path: &Path, e: convasr_tensor::TensorError) -> Error {
    match e {
        convasr_tensor::TensorError::Io(io) => Error::io(path, io),
        other => other.into(),
    }
}
