use convasr_tensor::{ParamId, Session, Var};

use super::layers::{add_positions, Attention, FeedForward, Init, LayerNorm, Linear};
use super::ModelConfig;
use crate::corpus::FeatureSequence;
use crate::{Error, Result};

/// Gated depthwise convolution module:
/// `pw_out(dwconv(pw_in(x) ⊙ 2σ(gate(x))) + dw_bias)`.
///
/// There is no residual around it. With identity point-wise weights, a zero
/// gate and a centred unit kernel the module passes its input through.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub pw_in: Linear,
    pub gate: Linear,
    pub kernel: ParamId,
    pub dw_bias: ParamId,
    pub pw_out: Linear,
}

impl ConvModule {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let a = self.pw_in.forward(s, x)?;
        let g = self.gate.forward(s, x)?;
        let g = s.graph.sigmoid(g)?;
        let g = s.graph.scale(g, 2.0)?;
        let u = s.graph.mul(a, g)?;
        let k = s.param(self.kernel);
        let c = s.graph.depthwise_conv1d(u, k)?;
        let b = s.param(self.dw_bias);
        let c = s.graph.add(c, b)?;
        self.pw_out.forward(s, c)
    }
}

/// `s = MHSA(LN(h)) + h; c = CONV(s); out = FFN(LN(c)) + c`.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ln_att: LayerNorm,
    pub att: Attention,
    pub conv: ConvModule,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl ConformerBlock {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let k = cfg.conv_kernel;
        Ok(Self {
            ln_att: init.layer_norm(&format!("{name}.ln_att"), d)?,
            att: init.attention(&format!("{name}.att"), d, cfg.heads)?,
            conv: ConvModule {
                pw_in: init.linear(&format!("{name}.conv.pw_in"), d, d, true)?,
                gate: init.linear(&format!("{name}.conv.gate"), d, d, true)?,
                kernel: init.uniform(&format!("{name}.conv.kernel"), &[k, d], (3.0 / k as f64).sqrt())?,
                dw_bias: init.constant(&format!("{name}.conv.dw_bias"), &[1, d], 0.0)?,
                pw_out: init.linear(&format!("{name}.conv.pw_out"), d, d, true)?,
            },
            ln_ff: init.layer_norm(&format!("{name}.ln_ff"), d)?,
            ff: init.feed_forward(&format!("{name}.ff"), d, cfg.d_ff)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let n = self.ln_att.forward(s, h)?;
        let a = self.att.forward(s, n, n, false)?;
        let x = s.graph.add(a, h)?;
        let c = self.conv.forward(s, x)?;
        let n = self.ln_ff.forward(s, c)?;
        let f = self.ff.forward(s, n)?;
        Ok(s.graph.add(f, c)?)
    }
}

/// Input projection (optionally stacking frame pairs) followed by conformer blocks.
#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub input: Linear,
    pub blocks: Vec<ConformerBlock>,
    pub subsample: bool,
    pub feature_dim: usize,
}

impl SpeechEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let stack = if cfg.subsample { 2 } else { 1 };
        Ok(Self {
            input: init.linear("encoder.input", stack * cfg.feature_dim, cfg.d_model, true)?,
            blocks: (0..cfg.n_conformer)
                .map(|i| ConformerBlock::new(init, &format!("encoder.block{i}"), cfg))
                .collect::<Result<_>>()?,
            subsample: cfg.subsample,
            feature_dim: cfg.feature_dim,
        })
    }

    /// Number of encoder frames produced for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        if self.subsample {
            frames / 2
        } else {
            frames
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: &FeatureSequence) -> Result<Var> {
        if x.dim() != self.feature_dim {
            return Err(Error::Input(format!(
                "features have dimension {}, model expects {}",
                x.dim(),
                self.feature_dim
            )));
        }
        let t_out = self.output_frames(x.frames());
        if t_out == 0 {
            return Err(Error::Input(format!(
                "{} frames is too short after subsampling",
                x.frames()
            )));
        }
        let mut input = s.graph.constant(x.tensor().clone());
        if self.subsample {
            // Stride-2 stacking: frame pairs become one row of width 2F.
            input = s.graph.slice(input, 0, 0, 2 * t_out)?;
            input = s.graph.reshape(input, &[t_out, 2 * self.feature_dim])?;
        }
        let h = self.input.forward(s, input)?;
        let mut h = add_positions(s, h)?;
        for block in &self.blocks {
            h = block.forward(s, h)?;
        }
        Ok(h)
    }
}
