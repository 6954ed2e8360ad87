//! Building blocks shared by the encoders, the decoder and the latent networks.

use convasr_tensor::{ParamId, ParamStore, Session, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Registers freshly initialised parameters in a store.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Ok(self.store.insert(name, Tensor::new(shape.to_vec(), data)?)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::full(shape, value))?)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = self.uniform(&format!("{name}.w"), &[d_in, d_out], bound)?;
        let b = if bias {
            Some(self.constant(&format!("{name}.b"), &[1, d_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.constant(&format!("{name}.gain"), &[d], 1.0)?,
            bias: self.constant(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn attention(&mut self, name: &str, d: usize, heads: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d, true)?,
            // A key bias shifts every score of a query equally, so softmax
            // ignores it; leaving it out keeps every parameter identifiable.
            k: self.linear(&format!("{name}.k"), d, d, false)?,
            v: self.linear(&format!("{name}.v"), d, d, true)?,
            o: self.linear(&format!("{name}.o"), d, d, true)?,
            heads,
        })
    }

    pub fn feed_forward(&mut self, name: &str, d: usize, d_ff: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, d_ff, true)?,
            down: self.linear(&format!("{name}.down"), d_ff, d, true)?,
        })
    }

    pub fn transformer_layer(
        &mut self,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Result<TransformerLayer> {
        Ok(TransformerLayer {
            att: self.attention(&format!("{name}.att"), d, heads)?,
            ln_att: self.layer_norm(&format!("{name}.ln_att"), d)?,
            ff: self.feed_forward(&format!("{name}.ff"), d, d_ff)?,
            ln_ff: self.layer_norm(&format!("{name}.ln_ff"), d)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let y = s.graph.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.param(b);
                Ok(s.graph.add(y, b)?)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain), s.param(self.bias));
        Ok(s.graph.layer_norm(x, g, b, 1)?)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// Attend from each row of `query` to the rows of `memory`. With
    /// `causal`, row `i` only sees memory rows `0..=i`.
    pub fn forward(&self, s: &mut Session<'_>, query: Var, memory: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, memory)?;
        let v = self.v.forward(s, memory)?;
        let (lq, d) = s.graph.value(q).dims2()?;
        let lk = s.graph.shape(k)[0];
        let dh = d / self.heads;
        let mask = if causal {
            let data = (0..lq * lk)
                .map(|i| if i % lk > i / lk { -1e30 } else { 0.0 })
                .collect();
            Some(s.graph.constant(Tensor::new(vec![lq, lk], data)?))
        } else {
            None
        };
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = s.graph.slice(q, 1, h * dh, dh)?;
            let kh = s.graph.slice(k, 1, h * dh, dh)?;
            let vh = s.graph.slice(v, 1, h * dh, dh)?;
            let kt = s.graph.transpose(kh)?;
            let scores = s.graph.matmul(qh, kt)?;
            let mut scores = s.graph.scale(scores, 1.0 / (dh as f64).sqrt())?;
            if let Some(m) = mask {
                scores = s.graph.add(scores, m)?;
            }
            let a = s.graph.softmax(scores, 1)?;
            outs.push(s.graph.matmul(a, vh)?);
        }
        let cat = s.graph.concat(&outs, 1)?;
        self.o.forward(s, cat)
    }
}

/// Two-layer position-wise network with a SiLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.graph.silu(h)?;
        self.down.forward(s, h)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub att: Attention,
    pub ln_att: LayerNorm,
    pub ff: FeedForward,
    pub ln_ff: LayerNorm,
}

impl TransformerLayer {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let a = self.att.forward(s, x, x, false)?;
        let x = s.graph.add(x, a)?;
        let x = self.ln_att.forward(s, x)?;
        let f = self.ff.forward(s, x)?;
        let x = s.graph.add(x, f)?;
        self.ln_ff.forward(s, x)
    }
}

/// Sinusoidal position table, `rows × d`.
pub fn positional_encoding(rows: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for i in 0..d {
            let rate = 10000f64.powf((i - i % 2) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![rows, d], data).expect("shape matches data")
}

/// `x + PE` for a `[rows, d]` input.
pub fn add_positions(s: &mut Session<'_>, x: Var) -> Result<Var> {
    let (rows, d) = s.graph.value(x).dims2()?;
    let pe = s.graph.constant(positional_encoding(rows, d));
    Ok(s.graph.add(x, pe)?)
}
