mod common;

use common::toy_config;
use convasr_core::corpus::{generate_synthetic_corpus, FeatureConfig, SyntheticConfig, Vocabulary};
use convasr_core::dataset::{build_examples, ContextWindows, Example};
use convasr_core::lvm::{kl_diagonal_gaussian, standard_noise, GaussianParams};
use convasr_core::training::*;
use convasr_core::{Error, Model, Prepared};
use convasr_tensor::{Session, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data() -> (Vocabulary, Vec<Vec<Example>>, Model) {
    let sc = SyntheticConfig {
        n_conversations: 3,
        turns_per_conv: 3,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&sc, 9).unwrap();
    let vocab = corpus.inventory.vocabulary(true);
    let fc = FeatureConfig {
        feature_dim: 3,
        ..Default::default()
    };
    let batches = build_examples(&corpus.conversations, &vocab, &fc, 4, ContextWindows::default()).unwrap();
    let cfg = convasr_core::backbone::ModelConfig {
        vocab_size: vocab.size(),
        ..toy_config(0)
    };
    (vocab, batches, Model::new(cfg, 5).unwrap())
}

fn fill(model: &mut Model, name: &str, value: f64) {
    let id = model.params.id(name).unwrap();
    model.params.get_mut(id).data_mut().fill(value);
}

fn ce(model: &Model, batch: &[Example]) -> f64 {
    let mut s = Session::inference(&model.params);
    let v = loss_ce(&mut s, model, batch).unwrap();
    s.graph.value(v).item().unwrap()
}

#[test]
fn uniform_decoder_costs_log_vocab_per_token() {
    let (_, batches, mut model) = data();
    fill(&mut model, "decoder.output.w", 0.0);
    fill(&mut model, "decoder.output.b", 0.0);
    let expect = (model.config.vocab_size as f64).ln();
    assert!((ce(&model, &batches[0]) - expect).abs() < 1e-12);
}

#[test]
fn batch_cross_entropy_is_token_weighted() {
    let (_, batches, model) = data();
    let batch = &batches[1];
    let mut num = 0.0;
    let mut den = 0;
    for ex in batch {
        let n = ex.target.len() + 1;
        num += ce(&model, std::slice::from_ref(ex)) * n as f64;
        den += n;
    }
    assert!((ce(&model, batch) - num / den as f64).abs() < 1e-12);
}

#[test]
fn latent_objective_matches_straight_line_oracle() {
    let (_, batches, model) = data();
    let batch = &batches[2];
    let beta = 0.37;
    let seed = 77;
    let (report, loss) = {
        let mut s = Session::new(&model.params);
        let (loss, report) = loss_vae(&mut s, &model, batch, beta, Stage::Two, seed).unwrap();
        let l = s.graph.value(loss).item().unwrap();
        (report, l)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_z = model.config.d_z;
    let (mut nll, mut kl_r, mut kl_d, mut tokens) = (0.0, 0.0, 0.0, 0usize);
    for ex in batch {
        let mut s = Session::inference(&model.params);
        let h_r = model.text.encode(&mut s, &ex.contexts.role_tokens).unwrap();
        let h_d = model.text.encode(&mut s, &ex.contexts.dia_tokens).unwrap();
        let pr = model.lvm.role.prior.forward(&mut s, h_r).unwrap();
        let pd = model.lvm.topic.prior.forward(&mut s, h_d).unwrap();
        let qr = model.lvm.role.posterior.forward(&mut s, &model.text, h_r, &ex.target_tokens).unwrap();
        let qd = model.lvm.topic.posterior.forward(&mut s, &model.text, h_d, &ex.target_tokens).unwrap();
        let [pr, pd, qr, qd] = [&pr, &pd, &qr, &qd].map(|v| GaussianParams::from_vars(&s, v));
        let sample = |q: &GaussianParams, eps: Vec<f64>| -> Tensor {
            Tensor::row((0..d_z).map(|i| q.mu[i] + q.sigma[i] * eps[i]).collect())
        };
        let z_role = sample(&qr, standard_noise(d_z, &mut rng));
        let z_dia = sample(&qd, standard_noise(d_z, &mut rng));
        let prep = Prepared {
            enc: model.encode(&ex.features).unwrap(),
            z_role,
            z_dia,
        };
        let (scores, eos) = model.score_tokens(&prep, &ex.target).unwrap();
        nll -= scores.iter().sum::<f64>() + eos;
        kl_r += kl_diagonal_gaussian(&qr, &pr).unwrap();
        kl_d += kl_diagonal_gaussian(&qd, &pd).unwrap();
        tokens += ex.target.len() + 1;
    }
    let n = tokens as f64;
    assert_eq!(report.tokens, tokens);
    assert!((report.l_ce - nll / n).abs() < 1e-10);
    assert!((report.kl_role - kl_r / n).abs() < 1e-10);
    assert!((report.kl_dia - kl_d / n).abs() < 1e-10);
    let expect = (nll + beta * (kl_r + kl_d)) / n;
    assert!((loss - expect).abs() < 1e-10);
    assert!((report.total - expect).abs() < 1e-10);
}

#[test]
fn matching_prior_and_posterior_have_zero_kl() {
    let (_, batches, mut model) = data();
    for branch in ["role", "topic"] {
        for net in ["prior", "posterior"] {
            for head in ["mu", "sigma"] {
                fill(&mut model, &format!("lvm.{branch}.{net}.{head}.w"), 0.0);
                fill(&mut model, &format!("lvm.{branch}.{net}.{head}.b"), 0.25);
            }
        }
    }
    let mut s = Session::new(&model.params);
    let (_, r) = loss_vae(&mut s, &model, &batches[0], 0.5, Stage::Two, 1).unwrap();
    assert_eq!(r.kl_role, 0.0);
    assert_eq!(r.kl_dia, 0.0);
    assert_eq!(r.total, r.l_ce);
}

#[test]
fn zero_beta_leaves_only_reconstruction() {
    let (_, batches, model) = data();
    let mut s = Session::new(&model.params);
    let (loss, r) = loss_vae(&mut s, &model, &batches[0], 0.0, Stage::Two, 3).unwrap();
    assert!(r.kl_role > 0.0);
    assert_eq!(r.total, r.l_ce);
    assert_eq!(s.graph.value(loss).item().unwrap(), r.l_ce);
}

#[test]
fn latent_objective_is_rejected_in_stage_one() {
    let (_, batches, model) = data();
    let mut s = Session::new(&model.params);
    assert!(matches!(
        loss_vae(&mut s, &model, &batches[0], 1.0, Stage::One, 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn stage_two_needs_a_complete_checkpoint() {
    let (_, _, model) = data();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("stage1.ckpt");
    match init_stage_two(model.config.clone(), &missing, 1) {
        Err(Error::Io { path, .. }) => assert!(path.contains("stage1.ckpt")),
        Err(e) => panic!("expected an I/O error, got {e}"),
        Ok(_) => panic!("missing checkpoint accepted"),
    }
    let partial = dir.path().join("partial.ckpt");
    model
        .params
        .filtered(|n| n.starts_with("encoder."))
        .save(&partial)
        .unwrap();
    assert!(matches!(init_stage_two(model.config.clone(), &partial, 1), Err(Error::Config(_))));
}

#[test]
fn stage_two_starts_from_the_stage_one_backbone() {
    let (_, batches, mut model) = data();
    let before = model.params.clone();
    let cfg = TrainConfig {
        steps: 3,
        log_interval: 0,
        ..Default::default()
    };
    train(&mut model, &batches, &cfg, &mut |_| {}).unwrap();
    let mut moved = 0;
    for (id, name, t) in model.params.iter() {
        if convasr_core::backbone::is_backbone_param(name) {
            moved += usize::from(t != before.get(id));
        } else {
            assert_eq!(t, before.get(id), "{name}");
        }
    }
    assert!(moved > 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage1.ckpt");
    save_checkpoint(&model, Stage::One, &path).unwrap();
    let second = init_stage_two(model.config.clone(), &path, 99).unwrap();
    for (_, name, t) in second.params.iter() {
        if convasr_core::backbone::is_backbone_param(name) {
            let a: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = model.params.by_name(name).unwrap().data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let run = |seed: u64| {
        let (_, batches, mut model) = data();
        let cfg = TrainConfig {
            stage: Stage::Two,
            steps: 4,
            warmup_steps: 2,
            seed,
            log_interval: 2,
            ..Default::default()
        };
        let mut lines = Vec::new();
        train(&mut model, &batches, &cfg, &mut |l| lines.push(l.to_string())).unwrap();
        (model.params, lines)
    };
    let (a, la) = run(1);
    let (b, lb) = run(1);
    let (c, _) = run(2);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la.len(), 2);
    assert!(la[0].starts_with("step=2 stage=2 l_ce="));
    assert_ne!(a, c);
}
