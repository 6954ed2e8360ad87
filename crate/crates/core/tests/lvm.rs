use std::collections::BTreeSet;

use convasr_core::backbone::ModelConfig;
use convasr_core::corpus::{EOS, SOS};
use convasr_core::lvm::{
    kl_diagonal_gaussian, kl_var, params_with_prefix, reparameterize, Branch, GaussianParams,
    SampleMode, Source,
};
use convasr_core::Model;
use convasr_tensor::{finite_difference_check, ParamStore, Session, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_conformer: 1,
        text_layers: 1,
        dec_layers: 1,
        posterior_layers: 2,
        d_model: 8,
        heads: 2,
        d_ff: 12,
        conv_kernel: 3,
        d_z: 3,
        vocab_size: 9,
        feature_dim: 3,
        subsample: true,
    }
}

fn pooled(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    Tensor::row((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = params_with_prefix(store, prefix).collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn prior_with_zero_weights() {
    let mut model = Model::new(toy_config(), 1).unwrap();
    zero_prefix(&mut model.params, "lvm.role.prior");
    let mut s = Session::inference(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = s.graph.constant(pooled(&mut rng, 8));
    let g = model.lvm.role.prior.forward(&mut s, h).unwrap();
    let g = GaussianParams::from_vars(&s, &g);
    assert_eq!(g.mu, vec![0.0; 3]);
    for sigma in g.sigma {
        assert!((sigma - 2f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn kl_gradient_through_prior_matches_finite_differences() {
    let model = Model::new(toy_config(), 3).unwrap();
    let mut store = model.params.filtered(|n| n.starts_with("lvm.role.prior"));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Randomise the zero-initialised biases.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let h = pooled(&mut rng, 8);
    let q = GaussianParams::new(vec![0.3, -0.2, 0.9], vec![0.7, 1.2, 0.4]).unwrap();
    // The handles index the full store, so rebuild the prior on the filtered one.
    let name = |suffix: &str| store.id(&format!("lvm.role.prior.{suffix}")).unwrap();
    let (mw, mb, sw, sb) = (name("mu.w"), name("mu.b"), name("sigma.w"), name("sigma.b"));
    let report = finite_difference_check::<_, convasr_core::Error>(&mut store, 1e-6, |s| {
        let hv = s.graph.constant(h.clone());
        let (mw, mb, sw, sb) = (s.param(mw), s.param(mb), s.param(sw), s.param(sb));
        let mu = s.graph.matmul(hv, mw)?;
        let mu = s.graph.add(mu, mb)?;
        let pre = s.graph.matmul(hv, sw)?;
        let pre = s.graph.add(pre, sb)?;
        let sigma = s.graph.softplus(pre)?;
        let p = convasr_core::lvm::GaussianVars { mu, sigma };
        let qv = convasr_core::lvm::GaussianVars {
            mu: s.graph.constant(Tensor::row(q.mu.clone())),
            sigma: s.graph.constant(Tensor::row(q.sigma.clone())),
        };
        kl_var(s, &qv, &p)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn posterior_sigma_is_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut trials = 0;
    for seed in 0..20 {
        let model = Model::new(toy_config(), seed).unwrap();
        let mut s = Session::inference(&model.params);
        for _ in 0..500 {
            let scale = rng.random_range(0.1..50.0);
            let h = pooled(&mut rng, 8).into_data().iter().map(|v| v * scale).collect();
            let h = s.graph.constant(Tensor::row(h));
            let len = rng.random_range(1..6);
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..9)).collect();
            let branch = if trials % 2 == 0 { &model.lvm.role } else { &model.lvm.topic };
            let g = branch.posterior.forward(&mut s, &model.text, h, &target).unwrap();
            assert!(s.graph.value(g.sigma).data().iter().all(|&v| v > 0.0));
            trials += 1;
        }
    }
    assert_eq!(trials, 10_000);
}

#[test]
fn posterior_depends_on_target_and_prior_does_not() {
    let model = Model::new(toy_config(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = pooled(&mut rng, 8);
    let run = |target: &[usize]| {
        let mut s = Session::inference(&model.params);
        let hv = s.graph.constant(h.clone());
        let prior = model.lvm.topic.prior.forward(&mut s, hv).unwrap();
        let post = model.lvm.topic.posterior.forward(&mut s, &model.text, hv, target).unwrap();
        (GaussianParams::from_vars(&s, &prior), GaussianParams::from_vars(&s, &post))
    };
    let (p1, q1) = run(&[SOS, 4, 5, EOS]);
    let (p2, q2) = run(&[SOS, 6, 7, 8, EOS]);
    assert_eq!(p1, p2);
    assert_ne!(q1, q2);
    let mut s = Session::inference(&model.params);
    let hv = s.graph.constant(h);
    assert!(model.lvm.role.posterior.forward(&mut s, &model.text, hv, &[]).is_err());
}

#[test]
fn branches_and_networks_share_no_parameters() {
    let model = Model::new(toy_config(), 8).unwrap();
    let touched = |f: &dyn Fn(&mut Session<'_>)| -> BTreeSet<usize> {
        let mut s = Session::new(&model.params);
        f(&mut s);
        s.bound_params().map(|(id, _)| id.index()).collect()
    };
    let text_params: BTreeSet<usize> = params_with_prefix(&model.params, "text.")
        .map(|id| id.index())
        .collect();
    let mut sets = Vec::new();
    for branch in [&model.lvm.role, &model.lvm.topic] {
        let prior = touched(&|s| {
            let h = s.graph.constant(Tensor::zeros(&[1, 8]));
            branch.prior.forward(s, h).unwrap();
        });
        let post = touched(&|s| {
            let h = s.graph.constant(Tensor::zeros(&[1, 8]));
            branch.posterior.forward(s, &model.text, h, &[SOS, 4, EOS]).unwrap();
        });
        // The posterior reads the shared embedding table; its own weights
        // are everything else.
        let own: BTreeSet<usize> = post.difference(&text_params).copied().collect();
        assert!(!prior.is_empty() && !own.is_empty());
        assert!(prior.is_disjoint(&own), "{} prior/posterior overlap", branch.branch);
        sets.push(prior.union(&own).copied().collect::<BTreeSet<_>>());
    }
    assert!(sets[0].is_disjoint(&sets[1]));
}

// Straight-line reimplementation of the posterior network from raw weights.
mod oracle {
    use convasr_tensor::ParamStore;

    pub type M = Vec<Vec<f64>>;

    pub fn get(store: &ParamStore, name: &str) -> M {
        let t = store.by_name(name).unwrap_or_else(|| panic!("missing {name}"));
        let cols = *t.shape().last().unwrap();
        t.data().chunks(cols).map(<[f64]>::to_vec).collect()
    }

    fn matmul(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                    .collect()
            })
            .collect()
    }

    fn add_row(a: &M, b: &[f64]) -> M {
        a.iter()
            .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect()
    }

    fn add(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect()
    }

    fn linear(store: &ParamStore, name: &str, x: &M, bias: bool) -> M {
        let y = matmul(x, &get(store, &format!("{name}.w")));
        if bias {
            add_row(&y, &get(store, &format!("{name}.b"))[0])
        } else {
            y
        }
    }

    fn layer_norm(store: &ParamStore, name: &str, x: &M) -> M {
        let g = &get(store, &format!("{name}.gain"))[0];
        let b = &get(store, &format!("{name}.bias"))[0];
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-10).sqrt();
                r.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    fn attention(store: &ParamStore, name: &str, x: &M, heads: usize) -> M {
        let q = linear(store, &format!("{name}.q"), x, true);
        let k = linear(store, &format!("{name}.k"), x, false);
        let v = linear(store, &format!("{name}.v"), x, true);
        let d = q[0].len();
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; x.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..x.len() {
                let scores: Vec<f64> = (0..x.len())
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    out[i][c] = (0..x.len()).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        linear(store, &format!("{name}.o"), &out, true)
    }

    fn silu(x: &M) -> M {
        x.iter()
            .map(|r| r.iter().map(|v| v / (1.0 + (-v).exp())).collect())
            .collect()
    }

    fn layer(store: &ParamStore, name: &str, x: &M, heads: usize) -> M {
        let a = attention(store, &format!("{name}.att"), x, heads);
        let x = layer_norm(store, &format!("{name}.ln_att"), &add(x, &a));
        let f = silu(&linear(store, &format!("{name}.ff.up"), &x, true));
        let f = linear(store, &format!("{name}.ff.down"), &f, true);
        layer_norm(store, &format!("{name}.ln_ff"), &add(&x, &f))
    }

    pub fn posterior(
        store: &ParamStore,
        prefix: &str,
        layers: usize,
        heads: usize,
        pooled: &[f64],
        target: &[usize],
    ) -> (Vec<f64>, Vec<f64>) {
        let table = get(store, "text.embed");
        let d = table[0].len();
        let mut x: M = target
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                (0..d)
                    .map(|i| {
                        let pair = (i / 2) as f64;
                        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
                        table[t][i] + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                    })
                    .collect()
            })
            .collect();
        for l in 0..layers {
            x = layer(store, &format!("{prefix}posterior.layer{l}"), &x, heads);
        }
        let n = x.len() as f64;
        let h_y: Vec<f64> = (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let joint = vec![[pooled, &h_y[..]].concat()];
        let mu = linear(store, &format!("{prefix}posterior.mu"), &joint, true).remove(0);
        let pre = linear(store, &format!("{prefix}posterior.sigma"), &joint, true).remove(0);
        let sigma = pre.iter().map(|v| (1.0 + v.exp()).ln()).collect();
        (mu, sigma)
    }
}

#[test]
fn posterior_matches_straight_line_reimplementation() {
    let cfg = toy_config();
    let model = Model::new(cfg.clone(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (branch, target) in [
        (Branch::Role, vec![SOS, 4, 7, 5, EOS]),
        (Branch::Topic, vec![SOS, 8, EOS]),
    ] {
        let h = pooled(&mut rng, cfg.d_model);
        let mut s = Session::inference(&model.params);
        let hv = s.graph.constant(h.clone());
        let g = model
            .lvm
            .branch(branch)
            .posterior
            .forward(&mut s, &model.text, hv, &target)
            .unwrap();
        let got = GaussianParams::from_vars(&s, &g);
        let (mu, sigma) = oracle::posterior(
            &model.params,
            branch.prefix(),
            cfg.posterior_layers,
            cfg.heads,
            h.data(),
            &target,
        );
        for (a, b) in got.mu.iter().zip(&mu).chain(got.sigma.iter().zip(&sigma)) {
            assert!((a - b).abs() < 1e-12, "{branch}: {a} vs {b}");
        }
    }
}

#[test]
fn sample_statistics_match_parameters() {
    let p = GaussianParams::new(vec![0.5, -2.0, 0.0], vec![0.3, 1.5, 1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let samples: Vec<Vec<f64>> = (0..n)
        .map(|_| reparameterize(&p, SampleMode::Sample, Branch::Role, Source::Posterior, &mut rng).z)
        .collect();
    let nf = n as f64;
    for d in 0..p.dim() {
        let mean = samples.iter().map(|z| z[d]).sum::<f64>() / nf;
        let sd = (samples.iter().map(|z| (z[d] - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        let se_mean = p.sigma[d] / nf.sqrt();
        let se_sd = p.sigma[d] / (2.0 * (nf - 1.0)).sqrt();
        assert!((mean - p.mu[d]).abs() < 3.0 * se_mean, "dim {d} mean {mean}");
        assert!((sd - p.sigma[d]).abs() < 3.0 * se_sd, "dim {d} sd {sd}");
    }
}

#[test]
fn kl_of_wider_posterior_matches_monte_carlo() {
    let q = GaussianParams::new(vec![0.0], vec![2.0]).unwrap();
    let p = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
    let exact = kl_diagonal_gaussian(&q, &p).unwrap();
    assert!((exact - 0.806853).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 1_000_000;
    let log_ratio = |z: f64| {
        let lq = -0.5 * (z / 2.0).powi(2) - 2f64.ln();
        let lp = -0.5 * z * z;
        lq - lp
    };
    let vals: Vec<f64> = (0..n)
        .map(|_| log_ratio(reparameterize(&q, SampleMode::Sample, Branch::Topic, Source::Posterior, &mut rng).z[0]))
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    assert!((mean - exact).abs() < 3.0 * (var / n as f64).sqrt(), "{mean} vs {exact}");
}

fn config() -> Config {
    Config {
        cases: 256,
        rng_seed: RngSeed::Fixed(0x6b6c),
        failure_persistence: None,
        ..Config::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(
        mu_q in prop::collection::vec(-3.0f64..3.0, 1..6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = mu_q.len();
        let sq: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..3.0)).collect();
        let mu_p: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sp: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..3.0)).collect();
        let q = GaussianParams::new(mu_q.clone(), sq.clone()).unwrap();
        let p = GaussianParams::new(mu_p, sp).unwrap();
        let kl = kl_diagonal_gaussian(&q, &p).unwrap();
        prop_assert!(kl > 0.0);
        prop_assert!(kl_diagonal_gaussian(&q, &q).unwrap().abs() <= 1e-12);
    }
}
