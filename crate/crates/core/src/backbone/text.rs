use convasr_tensor::{ParamId, Session, Tensor, Var};

use super::layers::{add_positions, Init, TransformerLayer};
use super::ModelConfig;
use crate::Result;

/// Word embedding, transformer encoder layers and mean pooling over time.
///
/// Role and dialogue contexts go through the same instance.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub d_model: usize,
}

impl TextEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            embed: init.uniform("text.embed", &[cfg.vocab_size, cfg.d_model], 1.0)?,
            layers: (0..cfg.text_layers)
                .map(|i| {
                    init.transformer_layer(&format!("text.layer{i}"), cfg.d_model, cfg.heads, cfg.d_ff)
                })
                .collect::<Result<_>>()?,
            d_model: cfg.d_model,
        })
    }

    /// Per-token encoder outputs, `[len, d_model]`; `tokens` must be non-empty.
    pub fn states(&self, s: &mut Session<'_>, tokens: &[usize]) -> Result<Var> {
        let table = s.param(self.embed);
        let x = s.graph.embedding(table, tokens)?;
        let mut h = add_positions(s, x)?;
        for layer in &self.layers {
            h = layer.forward(s, h)?;
        }
        Ok(h)
    }

    /// Mean-pooled encoding as `[1, d_model]`; the empty sequence pools to zeros.
    pub fn encode(&self, s: &mut Session<'_>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Ok(s.graph.constant(Tensor::zeros(&[1, self.d_model])));
        }
        let h = self.states(s, tokens)?;
        Ok(s.graph.mean_pool_time(h)?)
    }
}
