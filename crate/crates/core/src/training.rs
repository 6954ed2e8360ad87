//! Two-stage training.
//!
//! Stage 1 fits the speech encoder and decoder with cross-entropy and the
//! latent inputs held at zero. Stage 2 starts from a stage-1 checkpoint,
//! adds the text encoder and latent networks, and minimises
//! `(CE + β (KL_role + KL_dia)) / tokens`, where the CE term is computed with
//! latents drawn from the posteriors.

use std::fmt;
use std::path::Path;

use convasr_tensor::{ParamStore, Session, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{is_backbone_param, ModelConfig};
use crate::corpus::{EOS, SOS};
use crate::dataset::Example;
use crate::lvm::{kl_var, reparameterize_var, standard_noise};
use crate::{Error, Model, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Per-token loss components of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_ce: f64,
    pub kl_role: f64,
    pub kl_dia: f64,
    pub beta: f64,
    /// `l_ce + beta * (kl_role + kl_dia)`.
    pub total: f64,
    /// Predicted tokens in the batch, end symbols included.
    pub tokens: usize,
}

impl LossReport {
    fn assemble(l_ce: f64, kl_role: f64, kl_dia: f64, beta: f64, tokens: usize) -> Self {
        Self {
            l_ce,
            kl_role,
            kl_dia,
            beta,
            total: l_ce + beta * (kl_role + kl_dia),
            tokens,
        }
    }
}

/// `min(1, step / warmup_steps)`.
pub fn kl_anneal_weight(step: usize, warmup_steps: usize) -> Result<f64> {
    if warmup_steps == 0 {
        return Err(Error::Config("warmup_steps must be at least 1".into()));
    }
    Ok((step as f64 / warmup_steps as f64).min(1.0))
}

fn check_batch(batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    Ok(())
}

/// Summed negative log-likelihood of one example's target plus `<eos>`.
fn example_nll(
    s: &mut Session<'_>,
    model: &Model,
    ex: &Example,
    z_role: Var,
    z_dia: Var,
) -> Result<(Var, usize)> {
    let enc = model.backbone.encode(s, &ex.features)?;
    let inputs: Vec<usize> = std::iter::once(SOS).chain(ex.target.iter().copied()).collect();
    let outputs: Vec<usize> = ex.target.iter().copied().chain(std::iter::once(EOS)).collect();
    let lp = model.backbone.decoder.log_probs(s, enc, &inputs, z_role, z_dia)?;
    let picked = s.graph.gather_cols(lp, &outputs)?;
    let total = s.graph.sum(picked)?;
    Ok((s.graph.scale(total, -1.0)?, outputs.len()))
}

/// Per-token cross-entropy of a batch with both latents fixed at zero.
pub fn loss_ce(s: &mut Session<'_>, model: &Model, batch: &[Example]) -> Result<Var> {
    check_batch(batch)?;
    let zeros = Tensor::zeros(&[1, model.config.d_z]);
    let mut sum = None;
    let mut tokens = 0;
    for ex in batch {
        let zr = s.graph.constant(zeros.clone());
        let zd = s.graph.constant(zeros.clone());
        let (nll, n) = example_nll(s, model, ex, zr, zd)?;
        sum = Some(match sum {
            None => nll,
            Some(acc) => s.graph.add(acc, nll)?,
        });
        tokens += n;
    }
    let sum = sum.expect("batch is non-empty");
    Ok(s.graph.scale(sum, 1.0 / tokens as f64)?)
}

/// Stage-2 objective for a batch: reconstruction with posterior samples plus
/// `beta`-weighted KL terms, all per predicted token.
///
/// Reparameterisation noise comes from `noise_seed`, so the loss is a
/// deterministic function of the parameters.
pub fn loss_vae(
    s: &mut Session<'_>,
    model: &Model,
    batch: &[Example],
    beta: f64,
    stage: Stage,
    noise_seed: u64,
) -> Result<(Var, LossReport)> {
    if stage != Stage::Two {
        return Err(Error::Contract("the latent objective belongs to stage 2".into()));
    }
    check_batch(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let d_z = model.config.d_z;
    let mut nll_terms = Vec::with_capacity(batch.len());
    let mut kl_r_terms = Vec::with_capacity(batch.len());
    let mut kl_d_terms = Vec::with_capacity(batch.len());
    let mut tokens = 0;
    for ex in batch {
        let h_role = model.text.encode(s, &ex.contexts.role_tokens)?;
        let h_dia = model.text.encode(s, &ex.contexts.dia_tokens)?;
        let prior_r = model.lvm.role.prior.forward(s, h_role)?;
        let prior_d = model.lvm.topic.prior.forward(s, h_dia)?;
        let post_r = model.lvm.role.posterior.forward(s, &model.text, h_role, &ex.target_tokens)?;
        let post_d = model.lvm.topic.posterior.forward(s, &model.text, h_dia, &ex.target_tokens)?;
        let z_r = reparameterize_var(s, &post_r, &standard_noise(d_z, &mut rng))?;
        let z_d = reparameterize_var(s, &post_d, &standard_noise(d_z, &mut rng))?;
        let (nll, n) = example_nll(s, model, ex, z_r, z_d)?;
        nll_terms.push(nll);
        kl_r_terms.push(kl_var(s, &post_r, &prior_r)?);
        kl_d_terms.push(kl_var(s, &post_d, &prior_d)?);
        tokens += n;
    }
    let inv = 1.0 / tokens as f64;
    let mut total_of = |terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = s.graph.add(acc, t)?;
        }
        Ok(s.graph.scale(acc, inv)?)
    };
    let ce = total_of(&nll_terms)?;
    let kl_r = total_of(&kl_r_terms)?;
    let kl_d = total_of(&kl_d_terms)?;
    let kl = s.graph.add(kl_r, kl_d)?;
    let kl = s.graph.scale(kl, beta)?;
    let loss = s.graph.add(ce, kl)?;
    let value = |v: Var| s.graph.value(v).item();
    let report = LossReport::assemble(value(ce)?, value(kl_r)?, value(kl_d)?, beta, tokens);
    Ok((loss, report))
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Update every parameter for which `trainable[i]` holds.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], trainable: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    pub clip: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Emit a log line every this many steps (0 disables logging).
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::One,
            steps: 1000,
            lr: 1e-3,
            clip: 5.0,
            warmup_steps: 1000,
            seed: 0,
            log_interval: 100,
        }
    }
}

/// Optimiser and progress after training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub stage: Stage,
    pub seed: u64,
    pub optimizer: Adam,
    pub last: Option<LossReport>,
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "l_ce={:.6} kl_role={:.6} kl_dia={:.6} beta={:.4} total={:.6}",
            self.l_ce, self.kl_role, self.kl_dia, self.beta, self.total
        )
    }
}

/// Evaluate the objective of `stage` on one batch without updating anything.
pub fn evaluate_batch(
    model: &Model,
    batch: &[Example],
    stage: Stage,
    beta: f64,
    noise_seed: u64,
) -> Result<LossReport> {
    let mut s = Session::inference(&model.params);
    batch_loss(&mut s, model, batch, stage, beta, noise_seed).map(|(_, r)| r)
}

fn batch_loss(
    s: &mut Session<'_>,
    model: &Model,
    batch: &[Example],
    stage: Stage,
    beta: f64,
    noise_seed: u64,
) -> Result<(Var, LossReport)> {
    match stage {
        Stage::One => {
            let loss = loss_ce(s, model, batch)?;
            let l = s.graph.value(loss).item()?;
            let tokens = batch.iter().map(|e| e.target.len() + 1).sum();
            Ok((loss, LossReport::assemble(l, 0.0, 0.0, 0.0, tokens)))
        }
        Stage::Two => loss_vae(s, model, batch, beta, stage, noise_seed),
    }
}

/// Run `config.steps` optimiser updates, one conversation per step, visiting
/// conversations in a seeded shuffled order each epoch.
///
/// Stage 1 only updates the speech encoder and decoder.
pub fn train(
    model: &mut Model,
    batches: &[Vec<Example>],
    config: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<TrainState> {
    let batches: Vec<&Vec<Example>> = batches.iter().filter(|b| !b.is_empty()).collect();
    if batches.is_empty() {
        return Err(Error::Input("no training data".into()));
    }
    kl_anneal_weight(0, config.warmup_steps)?;
    let trainable: Vec<bool> = model
        .params
        .iter()
        .map(|(_, name, _)| config.stage == Stage::Two || is_backbone_param(name))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.params, config.lr);
    let mut order: Vec<usize> = Vec::new();
    let mut last = None;
    for step in 0..config.steps {
        if order.is_empty() {
            order = (0..batches.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let batch = batches[order.pop().expect("refilled above")];
        let beta = kl_anneal_weight(step, config.warmup_steps)?;
        let noise_seed: u64 = rng.random();
        let (mut grads, report) = {
            let mut s = Session::new(&model.params);
            let (loss, report) = batch_loss(&mut s, model, batch, config.stage, beta, noise_seed)?;
            if !report.total.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at step {step}")));
            }
            s.backward(loss)?;
            (s.gradients(), report)
        };
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        clip_global_norm(&mut grads, config.clip);
        adam.step(&mut model.params, &grads, &trainable);
        if config.log_interval > 0 && (step + 1) % config.log_interval == 0 {
            log(&format!(
                "step={} stage={} {report}",
                step + 1,
                config.stage.number()
            ));
        }
        last = Some(report);
    }
    Ok(TrainState {
        step: config.steps,
        stage: config.stage,
        seed: config.seed,
        optimizer: adam,
        last,
    })
}

/// Fresh model whose speech encoder and decoder come from a stage-1
/// checkpoint; the remaining parameters are initialised from `seed`.
pub fn init_stage_two(config: ModelConfig, checkpoint: impl AsRef<Path>, seed: u64) -> Result<Model> {
    let path = checkpoint.as_ref();
    let stored = ParamStore::load(path).map_err(|e| match e {
        convasr_tensor::TensorError::Io(io) => Error::io(path, io),
        other => other.into(),
    })?;
    init_stage_two_from(config, &stored, seed)
        .map_err(|e| Error::Config(format!("checkpoint {}: {e}", path.display())))
}

/// [`init_stage_two`] from parameters already in memory.
pub fn init_stage_two_from(config: ModelConfig, stored: &ParamStore, seed: u64) -> Result<Model> {
    let mut model = Model::new(config, seed)?;
    let expected = model.backbone_params();
    for (_, name, _) in expected.iter() {
        if stored.id(name).is_none() {
            return Err(Error::Config(format!("missing backbone parameter {name}")));
        }
    }
    model.assign_from(&stored.filtered(is_backbone_param))?;
    Ok(model)
}

/// Stage-appropriate checkpoint: backbone only after stage 1, everything
/// after stage 2.
pub fn save_checkpoint(model: &Model, stage: Stage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let store = match stage {
        Stage::One => model.backbone_params(),
        Stage::Two => model.params.clone(),
    };
    store.save(path).map_err(|e| match e {
        convasr_tensor::TensorError::Io(io) => Error::io(path, io),
        other => other.into(),
    })
}
