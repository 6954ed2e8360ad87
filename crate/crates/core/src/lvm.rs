//! Role and topic latent variables: prior and posterior networks,
//! reparameterised sampling and the diagonal-Gaussian KL divergence.
//!
//! Both branches have the same structure. The prior maps the pooled context
//! `h` to `mu = W h + b`, `sigma = softplus(W' h + b')`. The posterior runs
//! its own transformer layers over the embedded target sentence, mean-pools
//! them into `h_y` and applies the same two heads to `[h; h_y]`.

use std::fmt;

use convasr_tensor::{ParamId, Session, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::layers::{add_positions, Init, Linear, TransformerLayer};
use crate::backbone::{ModelConfig, TextEncoder};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Role,
    Topic,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Role => "lvm.role.",
            Branch::Topic => "lvm.topic.",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Role => "role",
            Branch::Topic => "topic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Prior,
    Posterior,
}

/// Diagonal Gaussian `N(mu, diag(sigma²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Contract(format!(
                "mu has {} dims, sigma {}",
                mu.len(),
                sigma.len()
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Read the values of graph-side parameters.
    pub fn from_vars(s: &Session<'_>, v: &GaussianVars) -> Self {
        Self {
            mu: s.graph.value(v.mu).data().to_vec(),
            sigma: s.graph.value(v.sigma).data().to_vec(),
        }
    }
}

/// Graph handles for a Gaussian, each `[1, d_z]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub branch: Branch,
    pub source: Source,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    Mean,
}

/// Standard-normal noise of length `dim`.
pub fn standard_noise(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// `z = mu + sigma ⊙ ε` (sample) or `z = mu` (mean).
pub fn reparameterize(
    p: &GaussianParams,
    mode: SampleMode,
    branch: Branch,
    source: Source,
    rng: &mut impl Rng,
) -> LatentSample {
    let z = match mode {
        SampleMode::Mean => p.mu.clone(),
        SampleMode::Sample => {
            let eps = standard_noise(p.dim(), rng);
            p.mu.iter()
                .zip(&p.sigma)
                .zip(eps)
                .map(|((m, s), e)| m + s * e)
                .collect()
        }
    };
    LatentSample { z, branch, source }
}

/// Graph version of [`reparameterize`] in sample mode with given noise.
pub fn reparameterize_var(s: &mut Session<'_>, p: &GaussianVars, eps: &[f64]) -> Result<Var> {
    let e = s.graph.constant(Tensor::row(eps.to_vec()));
    let scaled = s.graph.mul(p.sigma, e)?;
    Ok(s.graph.add(p.mu, scaled)?)
}

/// `KL(q ‖ p) = Σ_i ln(σp/σq) + (σq² + (μq − μp)²) / (2σp²) − ½`.
pub fn kl_diagonal_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Contract(format!(
            "KL between {}- and {}-dimensional Gaussians",
            q.dim(),
            p.dim()
        )));
    }
    if q.sigma.iter().chain(&p.sigma).any(|&s| !(s > 0.0)) {
        return Err(Error::Numeric("KL needs strictly positive sigma".into()));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (qs, ps) = (q.sigma[i], p.sigma[i]);
        let dm = q.mu[i] - p.mu[i];
        kl += (ps / qs).ln() + (qs * qs + dm * dm) / (2.0 * ps * ps) - 0.5;
    }
    Ok(kl)
}

/// Differentiable [`kl_diagonal_gaussian`], as a scalar.
pub fn kl_var(s: &mut Session<'_>, q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
    let g = &mut s.graph;
    let ratio = g.div(p.sigma, q.sigma)?;
    let log_ratio = g.ln(ratio)?;
    let qs2 = g.square(q.sigma)?;
    let dm = g.sub(q.mu, p.mu)?;
    let dm2 = g.square(dm)?;
    let num = g.add(qs2, dm2)?;
    let ps2 = g.square(p.sigma)?;
    let den = g.scale(ps2, 2.0)?;
    let frac = g.div(num, den)?;
    let terms = g.add(log_ratio, frac)?;
    let terms = g.add_scalar(terms, -0.5)?;
    Ok(g.sum(terms)?)
}

/// Mean head and softplus standard-deviation head.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mu: Linear,
    pub sigma: Linear,
}

impl GaussianHead {
    fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_z: usize) -> Result<Self> {
        Ok(Self {
            mu: init.linear(&format!("{name}.mu"), d_in, d_z, true)?,
            sigma: init.linear(&format!("{name}.sigma"), d_in, d_z, true)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, h: Var) -> Result<GaussianVars> {
        let mu = self.mu.forward(s, h)?;
        let pre = self.sigma.forward(s, h)?;
        let sigma = s.graph.softplus(pre)?;
        Ok(GaussianVars { mu, sigma })
    }
}

/// Prior network `p_θ(z | C)`.
#[derive(Clone, Debug)]
pub struct PriorNet {
    pub head: GaussianHead,
}

impl PriorNet {
    pub fn forward(&self, s: &mut Session<'_>, pooled: Var) -> Result<GaussianVars> {
        self.head.forward(s, pooled)
    }
}

/// Posterior network `q_φ(z | C, Y_k)`.
#[derive(Clone, Debug)]
pub struct PosteriorNet {
    pub layers: Vec<TransformerLayer>,
    pub head: GaussianHead,
}

impl PosteriorNet {
    /// `target` is the tokenised current sentence (with boundary symbols);
    /// its embeddings come from the shared text encoder's table.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        text: &TextEncoder,
        pooled: Var,
        target: &[usize],
    ) -> Result<GaussianVars> {
        if target.is_empty() {
            return Err(Error::Input("posterior needs a non-empty target".into()));
        }
        let table = s.param(text.embed);
        let x = s.graph.embedding(table, target)?;
        let mut h = add_positions(s, x)?;
        for layer in &self.layers {
            h = layer.forward(s, h)?;
        }
        let h_y = s.graph.mean_pool_time(h)?;
        let joint = s.graph.concat(&[pooled, h_y], 1)?;
        self.head.forward(s, joint)
    }
}

#[derive(Clone, Debug)]
pub struct BranchNets {
    pub branch: Branch,
    pub prior: PriorNet,
    pub posterior: PosteriorNet,
}

impl BranchNets {
    pub fn new(init: &mut Init<'_>, branch: Branch, cfg: &ModelConfig) -> Result<Self> {
        let p = branch.prefix();
        let d = cfg.d_model;
        Ok(Self {
            branch,
            prior: PriorNet {
                head: GaussianHead::new(init, &format!("{p}prior"), d, cfg.d_z)?,
            },
            posterior: PosteriorNet {
                layers: (0..cfg.posterior_layers)
                    .map(|i| {
                        init.transformer_layer(&format!("{p}posterior.layer{i}"), d, cfg.heads, cfg.d_ff)
                    })
                    .collect::<Result<_>>()?,
                head: GaussianHead::new(init, &format!("{p}posterior"), 2 * d, cfg.d_z)?,
            },
        })
    }
}

/// Both latent branches.
#[derive(Clone, Debug)]
pub struct Lvm {
    pub role: BranchNets,
    pub topic: BranchNets,
}

impl Lvm {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            role: BranchNets::new(init, Branch::Role, cfg)?,
            topic: BranchNets::new(init, Branch::Topic, cfg)?,
        })
    }

    pub fn branch(&self, b: Branch) -> &BranchNets {
        match b {
            Branch::Role => &self.role,
            Branch::Topic => &self.topic,
        }
    }
}

/// Parameter ids whose names start with `prefix`.
pub fn params_with_prefix<'a>(
    store: &'a convasr_tensor::ParamStore,
    prefix: &'a str,
) -> impl Iterator<Item = ParamId> + 'a {
    store
        .iter()
        .filter(move |(_, n, _)| n.starts_with(prefix))
        .map(|(id, _, _)| id)
}
