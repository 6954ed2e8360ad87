use convasr_tensor::{ParamId, Session, Var};

use super::layers::{add_positions, Attention, FeedForward, Init, LayerNorm, Linear};
use super::ModelConfig;
use crate::Result;

/// Post-norm decoder layer: causal self-attention, cross-attention over the
/// encoder states, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_att: Attention,
    pub ln_self: LayerNorm,
    pub cross_att: Attention,
    pub ln_cross: LayerNorm,
    pub ff: FeedForward,
    pub ln_ff: LayerNorm,
}

impl DecoderLayer {
    fn new(init: &mut Init<'_>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let (d, h) = (cfg.d_model, cfg.heads);
        Ok(Self {
            self_att: init.attention(&format!("{name}.self_att"), d, h)?,
            ln_self: init.layer_norm(&format!("{name}.ln_self"), d)?,
            cross_att: init.attention(&format!("{name}.cross_att"), d, h)?,
            ln_cross: init.layer_norm(&format!("{name}.ln_cross"), d)?,
            ff: init.feed_forward(&format!("{name}.ff"), d, cfg.d_ff)?,
            ln_ff: init.layer_norm(&format!("{name}.ln_ff"), d)?,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var, enc: Var) -> Result<Var> {
        let a = self.self_att.forward(s, x, x, true)?;
        let x = s.graph.add(x, a)?;
        let x = self.ln_self.forward(s, x)?;
        let c = self.cross_att.forward(s, x, enc, false)?;
        let x = s.graph.add(x, c)?;
        let x = self.ln_cross.forward(s, x)?;
        let f = self.ff.forward(s, x)?;
        let x = s.graph.add(x, f)?;
        self.ln_ff.forward(s, x)
    }
}

/// Merges each decoder state with the two latent vectors.
///
/// For step `t` a transformer layer attends from `h_s[t]` over the three
/// positions `[h_s[t]; W_r z_role; W_d z_dia]`; the result goes through
/// `tanh(· + b_trans)`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub proj_role: Linear,
    pub proj_dia: Linear,
    pub att: Attention,
    pub ln_att: LayerNorm,
    pub ff: FeedForward,
    pub ln_ff: LayerNorm,
    pub b_trans: ParamId,
}

impl Fusion {
    fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            proj_role: init.linear("decoder.fusion.proj_role", cfg.d_z, d, true)?,
            proj_dia: init.linear("decoder.fusion.proj_dia", cfg.d_z, d, true)?,
            att: init.attention("decoder.fusion.att", d, cfg.heads)?,
            ln_att: init.layer_norm("decoder.fusion.ln_att", d)?,
            ff: init.feed_forward("decoder.fusion.ff", d, cfg.d_ff)?,
            ln_ff: init.layer_norm("decoder.fusion.ln_ff", d)?,
            b_trans: init.constant("decoder.fusion.b_trans", &[1, d], 0.0)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, hs: Var, z_role: Var, z_dia: Var) -> Result<Var> {
        let zr = self.proj_role.forward(s, z_role)?;
        let zd = self.proj_dia.forward(s, z_dia)?;
        let zmem = s.graph.concat(&[zr, zd], 0)?;

        let att = &self.att;
        let q = att.q.forward(s, hs)?;
        let k_self = att.k.forward(s, hs)?;
        let v_self = att.v.forward(s, hs)?;
        let k_z = att.k.forward(s, zmem)?;
        let v_z = att.v.forward(s, zmem)?;
        let d = s.graph.shape(q)[1];
        let dh = d / att.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut heads = Vec::with_capacity(att.heads);
        for h in 0..att.heads {
            let qh = s.graph.slice(q, 1, h * dh, dh)?;
            let ksh = s.graph.slice(k_self, 1, h * dh, dh)?;
            let vsh = s.graph.slice(v_self, 1, h * dh, dh)?;
            let kzh = s.graph.slice(k_z, 1, h * dh, dh)?;
            let vzh = s.graph.slice(v_z, 1, h * dh, dh)?;
            // Each row scores only its own state plus the two latent slots.
            let own = s.graph.mul(qh, ksh)?;
            let own = s.graph.sum_axis(own, 1)?;
            let kzt = s.graph.transpose(kzh)?;
            let lat = s.graph.matmul(qh, kzt)?;
            let scores = s.graph.concat(&[own, lat], 1)?;
            let scores = s.graph.scale(scores, scale)?;
            let a = s.graph.softmax(scores, 1)?;
            let a_own = s.graph.slice(a, 1, 0, 1)?;
            let a_lat = s.graph.slice(a, 1, 1, 2)?;
            let from_own = s.graph.mul(a_own, vsh)?;
            let from_lat = s.graph.matmul(a_lat, vzh)?;
            heads.push(s.graph.add(from_own, from_lat)?);
        }
        let cat = s.graph.concat(&heads, 1)?;
        let o = att.o.forward(s, cat)?;
        let x = s.graph.add(hs, o)?;
        let x = self.ln_att.forward(s, x)?;
        let f = self.ff.forward(s, x)?;
        let x = s.graph.add(x, f)?;
        let x = self.ln_ff.forward(s, x)?;
        let b = s.param(self.b_trans);
        let x = s.graph.add(x, b)?;
        Ok(s.graph.tanh(x)?)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub fusion: Fusion,
    pub output: Linear,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            embed: init.uniform("decoder.embed", &[cfg.vocab_size, cfg.d_model], 1.0)?,
            layers: (0..cfg.dec_layers)
                .map(|i| DecoderLayer::new(init, &format!("decoder.layer{i}"), cfg))
                .collect::<Result<_>>()?,
            fusion: Fusion::new(init, cfg)?,
            output: init.linear("decoder.output", cfg.d_model, cfg.vocab_size, true)?,
        })
    }

    /// Log-probabilities `[inputs.len(), vocab]`; row `t` is the distribution
    /// of the token following `inputs[..=t]`.
    pub fn log_probs(
        &self,
        s: &mut Session<'_>,
        enc: Var,
        inputs: &[usize],
        z_role: Var,
        z_dia: Var,
    ) -> Result<Var> {
        let table = s.param(self.embed);
        let x = s.graph.embedding(table, inputs)?;
        let mut h = add_positions(s, x)?;
        for layer in &self.layers {
            h = layer.forward(s, h, enc)?;
        }
        let g = self.fusion.forward(s, h, z_role, z_dia)?;
        let logits = self.output.forward(s, g)?;
        Ok(s.graph.log_softmax(logits, 1)?)
    }
}
