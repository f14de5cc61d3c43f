mod common;

use common::*;
use proptest::prelude::*;
use sctts_core::model::{self, ModelConfig, ModelParams, StyleSource};
use sctts_core::nn::{Graph, ParamStore, Tensor};

#[test]
fn every_layer_matches_finite_differences() {
    for (name, result) in layer_gradient_checks(5) {
        let n = result.unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(n >= 5, "{name}: only {n} coordinates checked");
    }
}

#[test]
fn audio_encoder_and_decoder_are_causal() {
    check_causality().unwrap();
}

#[test]
fn attention_rows_are_stochastic() {
    check_attention_rows().unwrap();
}

#[test]
fn postnet_upsamples_by_four() {
    check_postnet_length().unwrap();
}

#[test]
fn style_token_weights_are_on_the_simplex() {
    check_gst_simplex().unwrap();
}

#[test]
fn evaluation_is_deterministic() {
    check_eval_determinism().unwrap();
}

fn zero_params(use_gst: bool) -> ModelParams {
    tiny_params(use_gst, 0).zeroed()
}

#[test]
fn zero_parameters_give_neutral_outputs() {
    let p = zero_params(true);
    let cfg = &p.config;
    let mut g = Graph::new(&p.store);
    let x = model::embed_conditioned(&mut g, cfg, &sequence(7, 12, 1), 1.3).unwrap();
    let (k, v) = model::text_encode(&mut g, cfg, x, 1.3);
    assert_eq!(g.shape(k), &[7, cfg.hidden_dim]);
    assert!(g
        .value(k)
        .data()
        .iter()
        .chain(g.value(v).data())
        .all(|&x| x == 0.0));

    let zero_in = g.constant(Tensor::zeros(&[5, 80]));
    let q = model::audio_encode(&mut g, cfg, zero_in);
    assert_eq!(g.shape(q), &[5, cfg.hidden_dim]);
    assert!(g.value(q).data().iter().all(|&x| x == 0.0));

    let r = g.constant(Tensor::zeros(&[5, 2 * cfg.hidden_dim]));
    let c = model::decode(&mut g, cfg, r);
    assert_eq!(g.shape(c), &[5, 80]);
    assert!(g.value(c).data().iter().all(|&x| x == 0.5));

    let coarse = g.constant(Tensor::zeros(&[6, 80]));
    let m = model::postnet(&mut g, cfg, coarse);
    assert_eq!(g.shape(m), &[24, 80]);
    assert!(g.value(m).data().iter().all(|&x| x == 0.5));

    let reference = g.constant(Tensor::zeros(&[33, 80]));
    let e = model::gst_reference_encode(&mut g, cfg, reference);
    assert_eq!(g.shape(e), &[1, cfg.style_dim]);
    assert!(g.value(e).data().iter().all(|&x| x == 0.0));

    let (_, w) = model::gst_style_embedding(&mut g, cfg, e);
    let expected = 1.0 / cfg.num_tokens as f64;
    assert!(g
        .value(w)
        .data()
        .iter()
        .all(|&x| (x - expected).abs() < 1e-12));
}

#[test]
fn default_sizes() {
    let cfg = ModelConfig {
        vocab_size: 20,
        use_gst: true,
        ..ModelConfig::default()
    };
    let p = ModelParams::init(cfg, 1).unwrap();
    let c = &p.config;
    let mut g = Graph::new(&p.store);
    let x = model::embed_conditioned(&mut g, c, &sequence(7, 20, 2), 0.0).unwrap();
    let (k, v) = model::text_encode(&mut g, c, x, 0.0);
    assert_eq!((g.shape(k), g.shape(v)), (&[7, 256][..], &[7, 256][..]));
    let q_in = g.constant(random_tensor(&[5, 80], 1, 0.0, 1.0));
    let q = model::audio_encode(&mut g, c, q_in);
    assert_eq!(g.shape(q), &[5, 256]);
    let reference = g.constant(random_tensor(&[50, 80], 3, 0.0, 1.0));
    let e = model::gst_reference_encode(&mut g, c, reference);
    assert_eq!(g.shape(e), &[1, 128]);
    let (style, w) = model::gst_style_embedding(&mut g, c, e);
    assert_eq!(g.shape(w), &[4, 10]);
    let (k2, v2) = model::fuse_style(&mut g, c, k, v, style);
    assert_eq!((g.shape(k2), g.shape(v2)), (&[7, 256][..], &[7, 256][..]));
}

#[test]
fn attention_limits() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let q = g.constant(random_tensor(&[4, 6], 1, -1.0, 1.0));
    let zero_k = g.constant(Tensor::zeros(&[5, 6]));
    let v = g.constant(random_tensor(&[5, 6], 2, -1.0, 1.0));
    let (_, a) = model::attend(&mut g, q, zero_k, v);
    assert!(g.value(a).data().iter().all(|&x| (x - 0.2).abs() < 1e-12));

    let k1 = g.constant(random_tensor(&[1, 6], 3, -1.0, 1.0));
    let v1 = g.constant(random_tensor(&[1, 6], 4, -1.0, 1.0));
    let (ctx, a) = model::attend(&mut g, q, k1, v1);
    assert!(g.value(a).data().iter().all(|&x| x == 1.0));
    for t in 0..4 {
        assert_eq!(g.value(ctx).row(t), g.value(v1).row(0));
    }

    let keys = random_tensor(&[5, 6], 5, -1.0, 1.0);
    let query = Tensor::new(&[1, 6], keys.row(3).iter().map(|x| x * 400.0).collect());
    let k = g.constant(keys);
    let qv = g.constant(query);
    let (ctx, a) = model::attend(&mut g, qv, k, v);
    assert!((g.value(a).at(0, 3) - 1.0).abs() < 1e-3);
    for (c, target) in g.value(ctx).row(0).iter().zip(g.value(v).row(3)) {
        assert!((c - target).abs() < 1e-3);
    }
}

#[test]
fn forced_token_weights_pick_one_token() {
    let p = tiny_params(true, 4);
    let cfg = &p.config;
    let j = 6;
    let mut w = Tensor::zeros(&[cfg.num_heads, cfg.num_tokens]);
    for h in 0..cfg.num_heads {
        w.set(h, j, 1.0);
    }
    let mut g = Graph::new(&p.store);
    let style = model::gst_style_from_weights(&mut g, cfg, &w).unwrap();
    // oracle: tanh(bank[j]) @ Wv computed by hand
    let bank = p.store.by_name("gst.tokens").unwrap();
    let wv = p.store.by_name("gst.wv").unwrap();
    let s = cfg.style_dim;
    for c in 0..s {
        let expected: f64 = (0..s).map(|i| bank.at(j, i).tanh() * wv.at(i, c)).sum();
        assert!((g.value(style).at(0, c) - expected).abs() < 1e-12);
    }
    let mut bad = w.clone();
    bad.set(0, 0, 0.5);
    assert!(model::gst_style_from_weights(&mut g, cfg, &bad).is_err());
}

#[test]
fn identity_fusion_passes_keys_and_values_through() {
    let mut p = tiny_params(true, 4);
    let d = p.config.hidden_dim;
    let s = p.config.style_dim;
    let mut w = Tensor::zeros(&[2 * d + s, 2 * d]);
    for i in 0..2 * d {
        w.set(i, i, 1.0);
    }
    let wid = p.store.id("fuse.w").unwrap();
    *p.store.get_mut(wid) = w;
    let bid = p.store.id("fuse.b").unwrap();
    p.store.get_mut(bid).data_mut().fill(0.0);
    let mut g = Graph::new(&p.store);
    let k = g.constant(random_tensor(&[7, d], 1, -1.0, 1.0));
    let v = g.constant(random_tensor(&[7, d], 2, -1.0, 1.0));
    let zero_style = g.constant(Tensor::zeros(&[1, s]));
    let (k2, v2) = model::fuse_style(&mut g, &p.config, k, v, zero_style);
    assert_eq!(g.value(k2), g.value(k));
    assert_eq!(g.value(v2), g.value(v));
}

#[test]
fn rate_column_reaches_the_output() {
    let p = tiny_params(false, 8);
    let seq = sequence(6, 12, 2);
    let teacher = random_tensor(&[8, 80], 3, 0.0, 1.0);
    let a = model::forward_t2m(&seq, 8.0, &stats(), &teacher, None, &p).unwrap();
    let b = model::forward_t2m(&seq, 11.0, &stats(), &teacher, None, &p).unwrap();
    assert!(a.mel.abs_diff_sum(&b.mel) > 0.0);
}

#[test]
fn style_source_choice_matters_only_with_gst() {
    let p = tiny_params(true, 8);
    let seq = sequence(4, 12, 2);
    let teacher = random_tensor(&[5, 80], 3, 0.0, 1.0);
    let mut g = Graph::new(&p.store);
    let r = model::forward_graph(&mut g, &p.config, &seq, 0.0, &teacher, StyleSource::None);
    assert!(r.is_err());
}

#[test]
fn position_codes_match_closed_form() {
    let t = model::positional_table(7, 8, 2.5);
    for i in 0..7 {
        for j in 0..4 {
            let angle = i as f64 * 2.5 / 10000f64.powf(2.0 * j as f64 / 8.0);
            assert!((t.at(i, 2 * j) - angle.sin()).abs() < 1e-12);
            assert!((t.at(i, 2 * j + 1) - angle.cos()).abs() < 1e-12);
        }
    }
}

#[test]
fn key_pace_matches_frames_per_phoneme() {
    let (lambda, mean_r, std_r) = (100.0, 9.0, 2.4);
    let cfg = ModelConfig {
        key_position_rate: Some(lambda / (4.0 * mean_r)),
        key_rate_spread: Some(std_r / mean_r),
        ..ModelConfig::tiny(12)
    };
    for r in [5.0, 9.0, 14.5] {
        let z = (r - mean_r) / std_r;
        let expected = lambda / r / 4.0;
        assert!(
            (model::key_rate(&cfg, z) - expected).abs() < 1e-12,
            "r = {r}"
        );
    }
    let fixed = ModelConfig {
        key_rate_spread: None,
        ..cfg
    };
    assert_eq!(model::key_rate(&fixed, 2.0), 100.0 / 36.0);
}

#[test]
fn position_codes_can_be_disabled() {
    let cfg = ModelConfig {
        positional_encoding: false,
        ..ModelConfig::tiny(12)
    };
    let p = ModelParams::init(cfg, 3).unwrap();
    assert!(p.store.id("pos.key_gain").is_none());
    let seq = sequence(5, 12, 1);
    let teacher = random_tensor(&[6, 80], 2, 0.0, 1.0);
    let out = model::forward_t2m(&seq, 9.0, &stats(), &teacher, None, &p).unwrap();
    assert_eq!(out.coarse.shape(), &[6, 80]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn shapes_compose(p_len in 1usize..15, tc in 1usize..12, seed in 0u64..1000) {
        let params = tiny_params(false, seed);
        let seq = sequence(p_len, 12, seed);
        let teacher = random_tensor(&[tc, 80], seed, 0.0, 1.0);
        let out = model::forward_t2m(&seq, 9.0, &stats(), &teacher, None, &params).unwrap();
        prop_assert_eq!(out.coarse.shape(), &[tc, 80]);
        prop_assert_eq!(out.mel.shape(), &[4 * tc, 80]);
        prop_assert_eq!(out.attention.values().shape(), &[tc, p_len]);
        prop_assert!(out.mel.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
