use convasr_core::backbone::layers::Init;
use convasr_core::backbone::{ConformerBlock, ModelConfig, SpeechEncoder};
use convasr_core::corpus::{ContextPair, FeatureSequence, EOS, SOS};
use convasr_core::{LatentFlags, Model};
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
        posterior_layers: 1,
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

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn features(rng: &mut ChaCha8Rng, t: usize, f: usize) -> FeatureSequence {
    FeatureSequence::new(random_tensor(rng, t, f)).unwrap()
}

fn set(store: &mut ParamStore, name: &str, f: impl Fn(usize, usize) -> f64) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = store.get_mut(id);
    let cols = t.shape()[t.rank() - 1];
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i / cols, i % cols);
    }
}

#[test]
fn conformer_block_preserves_shape() {
    let cfg = ModelConfig {
        d_model: 16,
        ..toy_config()
    };
    let mut store = ParamStore::new();
    let block = ConformerBlock::new(&mut Init::new(&mut store, 1), "b", &cfg).unwrap();
    let mut s = Session::inference(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = s.graph.constant(random_tensor(&mut rng, 7, 16));
    let out = block.forward(&mut s, h).unwrap();
    assert_eq!(s.graph.shape(out), &[7, 16]);
}

#[test]
fn conformer_block_with_residual_paths_only_is_identity() {
    let cfg = toy_config();
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    let block = ConformerBlock::new(&mut Init::new(&mut store, 3), "b", &cfg).unwrap();
    let identity = |r: usize, c: usize| if r == c { 1.0 } else { 0.0 };
    let zero = |_: usize, _: usize| 0.0;
    set(&mut store, "b.att.o.w", zero);
    set(&mut store, "b.conv.pw_in.w", identity);
    set(&mut store, "b.conv.gate.w", zero);
    set(&mut store, "b.conv.kernel", |r, _| if r == cfg.conv_kernel / 2 { 1.0 } else { 0.0 });
    set(&mut store, "b.conv.pw_out.w", identity);
    set(&mut store, "b.ff.down.w", zero);
    let mut s = Session::inference(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = random_tensor(&mut rng, 5, d);
    let h = s.graph.constant(input.clone());
    let out = block.forward(&mut s, h).unwrap();
    for (a, b) in s.graph.value(out).data().iter().zip(input.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn conformer_block_gradients_match_finite_differences() {
    let cfg = toy_config();
    let mut store = ParamStore::new();
    let block = ConformerBlock::new(&mut Init::new(&mut store, 5), "b", &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = random_tensor(&mut rng, 5, cfg.d_model);
    let weights = random_tensor(&mut rng, 5, cfg.d_model);
    // Non-zero biases so no gradient sits at a symmetric point.
    for (id, name, _) in store.iter().map(|(i, n, t)| (i, n.to_string(), t.len())).collect::<Vec<_>>() {
        if name.ends_with(".b") || name.ends_with("bias") {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let report = finite_difference_check::<_, convasr_core::Error>(&mut store, 1e-6, |s| {
        let h = s.graph.constant(input.clone());
        let out = block.forward(s, h)?;
        let w = s.graph.constant(weights.clone());
        let p = s.graph.mul(out, w)?;
        Ok(s.graph.sum(p)?)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn speech_encoder_subsamples_and_is_deterministic() {
    let cfg = toy_config();
    let model = Model::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = features(&mut rng, 8, cfg.feature_dim);
    let a = model.encode(&x).unwrap();
    assert_eq!(a.shape(), &[4, cfg.d_model]);
    assert_eq!(a, model.encode(&x).unwrap());
    let short = features(&mut rng, 1, cfg.feature_dim);
    assert!(model.encode(&short).is_err());
    let wrong_dim = features(&mut rng, 8, cfg.feature_dim + 1);
    assert!(model.encode(&wrong_dim).is_err());
}

#[test]
fn speech_encoder_gradients_match_finite_differences() {
    let cfg = toy_config();
    let mut store = ParamStore::new();
    let encoder = SpeechEncoder::new(&mut Init::new(&mut store, 9), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = features(&mut rng, 6, cfg.feature_dim);
    let report = finite_difference_check::<_, convasr_core::Error>(&mut store, 1e-6, |s| {
        let h = encoder.forward(s, &x)?;
        Ok(s.graph.sum(h)?)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn text_encoder_pooling_and_sharing() {
    let cfg = toy_config();
    let model = Model::new(cfg.clone(), 11).unwrap();
    let mut s = Session::inference(&model.params);
    let single = model.text.encode(&mut s, &[5]).unwrap();
    let states = model.text.states(&mut s, &[5]).unwrap();
    assert_eq!(s.graph.value(single).data(), s.graph.value(states).data());
    let empty = model.text.encode(&mut s, &[]).unwrap();
    assert_eq!(s.graph.value(empty), &Tensor::zeros(&[1, cfg.d_model]));

    let touched = |tokens: &[usize]| {
        let mut s = Session::new(&model.params);
        model.text.encode(&mut s, tokens).unwrap();
        s.bound_params().map(|(id, _)| id).collect::<Vec<_>>()
    };
    let role = touched(&[SOS, 4, 5, EOS]);
    let dia = touched(&[SOS, 6, EOS, SOS, 7, 8, EOS]);
    assert!(!role.is_empty());
    assert_eq!(role, dia);
}

fn prepared(model: &Model, seed: u64) -> convasr_core::Prepared {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = features(&mut rng, 8, model.config.feature_dim);
    let ctx = ContextPair {
        role_tokens: vec![SOS, 4, 6, EOS],
        dia_tokens: vec![SOS, 5, EOS, SOS, 4, 6, EOS],
        ..Default::default()
    };
    model.prepare(&x, &ctx, LatentFlags::ALL).unwrap()
}

#[test]
fn decode_step_is_a_distribution() {
    let model = Model::new(toy_config(), 12).unwrap();
    let prep = prepared(&model, 13);
    let p = model.decode_step(&prep, &[4, 7]).unwrap();
    assert_eq!(p.len(), model.config.vocab_size);
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert!(p.iter().all(|&v| v > 0.0));
}

#[test]
fn zero_output_weights_give_uniform_distribution() {
    let mut model = Model::new(toy_config(), 14).unwrap();
    set(&mut model.params, "decoder.output.w", |_, _| 0.0);
    let prep = prepared(&model, 15);
    let v = model.config.vocab_size as f64;
    for p in model.decode_step(&prep, &[5]).unwrap() {
        assert!((p - 1.0 / v).abs() < 1e-15);
    }
}

#[test]
fn teacher_forced_scores_equal_independent_steps() {
    let model = Model::new(toy_config(), 16).unwrap();
    let prep = prepared(&model, 17);
    let tokens = [4, 8, 6, 5];
    let (per_token, eos) = model.score_tokens(&prep, &tokens).unwrap();
    for t in 0..tokens.len() {
        let p = model.decode_step(&prep, &tokens[..t]).unwrap();
        assert!((per_token[t] - p[tokens[t]].ln()).abs() < 1e-12);
    }
    let p = model.decode_step(&prep, &tokens).unwrap();
    assert!((eos - p[EOS].ln()).abs() < 1e-12);
}

#[test]
fn decoding_is_causal() {
    let model = Model::new(toy_config(), 18).unwrap();
    let prep = prepared(&model, 19);
    let rows = |inputs: &[usize]| {
        let mut s = Session::inference(&model.params);
        let lp = model.decoder_log_probs(&mut s, &prep, inputs).unwrap();
        s.graph.value(lp).clone()
    };
    let a = rows(&[SOS, 4, 5, 6, 7]);
    let b = rows(&[SOS, 4, 5, 8, 4]);
    let v = model.config.vocab_size;
    assert_eq!(a.data()[..3 * v], b.data()[..3 * v]);
    assert_ne!(a.data()[3 * v..4 * v], b.data()[3 * v..4 * v]);
}

fn config() -> Config {
    Config {
        cases: 16,
        rng_seed: RngSeed::Fixed(0xbeef),
        failure_persistence: None,
        ..Config::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn shapes_hold_for_random_configs(
        heads in 1usize..3,
        head_dim in 1usize..4,
        d_z in 1usize..4,
        kernel in 0usize..3,
        subsample in any::<bool>(),
        frames in 2usize..9,
        seed in any::<u64>(),
    ) {
        let cfg = ModelConfig {
            heads,
            d_model: heads * head_dim,
            d_z,
            conv_kernel: 2 * kernel + 1,
            subsample,
            ..toy_config()
        };
        let model = Model::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = features(&mut rng, frames, cfg.feature_dim);
        let prep = model.prepare(&x, &ContextPair::default(), LatentFlags::ALL).unwrap();
        let t_out = if subsample { frames / 2 } else { frames };
        prop_assert_eq!(prep.enc.shape(), &[t_out, cfg.d_model][..]);
        prop_assert_eq!(prep.z_role.shape(), &[1, d_z][..]);
        let (scores, _) = model.score_tokens(&prep, &[4, 5]).unwrap();
        prop_assert_eq!(scores.len(), 2);
    }
}
