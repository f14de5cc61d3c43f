//! Independent oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sctts_core::model::{self, ModelConfig, ModelParams, StyleSource};
use sctts_core::nn::{Graph, ParamStore, Tensor, Var};
use sctts_core::rate::RateStats;
use sctts_core::text::PhonemeSequence;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Differences below `FD_NOISE * max(|loss|, 1) / FD_STEP` are under the
/// rounding noise of a central difference and cannot be resolved.
pub const FD_NOISE: f64 = 100.0 * f64::EPSILON;

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

pub fn sequence(p: usize, vocab: usize, seed: u64) -> PhonemeSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PhonemeSequence {
        ids: (0..p).map(|_| rng.gen_range(0..vocab)).collect(),
        phoneme_count: p,
    }
}

pub fn stats() -> RateStats {
    RateStats {
        mean_r: 9.0,
        std_r: 2.5,
        n: 100,
    }
}

pub fn tiny_params(use_gst: bool, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        use_gst,
        ..ModelConfig::tiny(12)
    };
    ModelParams::init(cfg, seed).unwrap()
}

/// Central-difference check of every parameter the loss touches. Returns the
/// number of coordinates checked, or a description of the first mismatch.
pub fn grad_check(
    store: &ParamStore,
    loss: &dyn Fn(&mut Graph) -> Var,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<usize, String> {
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = loss(&mut g);
        (g.value(l).data()[0], g.kink_pattern())
    };
    let mut g = Graph::new(store);
    let l = loss(&mut g);
    let grads = g.backward(l);
    let floor = FD_NOISE * g.value(l).data()[0].abs().max(1.0) / FD_STEP;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturbed = store.clone();
    let mut checked = 0;
    for id in store.ids() {
        let Some(analytic) = grads.param(id) else {
            continue;
        };
        let n = analytic.len();
        let want = coords_per_tensor.min(n);
        let mut done = 0;
        // coordinates whose step crosses a kink are redrawn
        for _ in 0..20 * want {
            if done == want {
                break;
            }
            let j = rng.gen_range(0..n);
            let orig = store.get(id).data()[j];
            perturbed.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let (up, up_pattern) = eval(&perturbed);
            perturbed.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let (down, down_pattern) = eval(&perturbed);
            perturbed.get_mut(id).data_mut()[j] = orig;
            if up_pattern != down_pattern {
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let diff = (a - numeric).abs();
            if diff > floor && diff / a.abs().max(numeric.abs()) >= FD_REL_TOL {
                return Err(format!(
                    "{}[{j}]: analytic {a:e} vs numeric {numeric:e}",
                    store.name(id)
                ));
            }
            done += 1;
        }
        if done < want {
            return Err(format!(
                "{}: too many coordinates sit on kinks",
                store.name(id)
            ));
        }
        checked += done;
    }
    if checked == 0 {
        return Err("loss touched no parameters".into());
    }
    Ok(checked)
}

/// Scalar probe `sum(out * w)` with fixed random weights.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    g.weighted_sum(out, random_tensor(&shape, seed, -1.0, 1.0))
}

/// Gradient checks of each parameterized layer and of the composite loss.
pub fn layer_gradient_checks(coords: usize) -> Vec<(&'static str, Result<usize, String>)> {
    let p = tiny_params(true, 11);
    let cfg = p.config.clone();
    let seq = sequence(6, cfg.vocab_size, 1);
    let teacher = random_tensor(&[5, 80], 2, 0.0, 1.0);
    let reference = random_tensor(&[40, 80], 3, 0.0, 1.0);
    let hidden = random_tensor(&[5, 2 * cfg.hidden_dim], 4, -1.0, 1.0);
    let kv = random_tensor(&[6, cfg.hidden_dim], 5, -1.0, 1.0);
    let style_in = random_tensor(&[1, cfg.style_dim], 6, -1.0, 1.0);
    let coarse_pred = random_tensor(&[4, 80], 7, 0.05, 0.95);
    let mut out = Vec::new();

    let c = cfg.clone();
    out.push((
        "text encoder",
        grad_check(
            &p.store,
            &|g| {
                let x = model::embed_conditioned(g, &c, &seq, 0.4).unwrap();
                let (k, v) = model::text_encode(g, &c, x, 0.4);
                let both = g.concat_cols(&[k, v]);
                probe(g, both, 20)
            },
            coords,
            1,
        ),
    ));
    out.push((
        "audio encoder",
        grad_check(
            &p.store,
            &|g| {
                let x = g.constant(teacher.clone());
                let q = model::audio_encode(g, &c, x);
                probe(g, q, 21)
            },
            coords,
            2,
        ),
    ));
    out.push((
        "decoder",
        grad_check(
            &p.store,
            &|g| {
                let x = g.constant(hidden.clone());
                let y = model::decode(g, &c, x);
                probe(g, y, 22)
            },
            coords,
            3,
        ),
    ));
    out.push((
        "post-network",
        grad_check(
            &p.store,
            &|g| {
                let x = g.constant(coarse_pred.clone());
                let y = model::postnet(g, &c, x);
                probe(g, y, 23)
            },
            coords,
            4,
        ),
    ));
    out.push((
        "reference encoder",
        grad_check(
            &p.store,
            &|g| {
                let x = g.constant(reference.clone());
                let y = model::gst_reference_encode(g, &c, x);
                probe(g, y, 24)
            },
            coords,
            5,
        ),
    ));
    out.push((
        "style tokens",
        grad_check(
            &p.store,
            &|g| {
                let x = g.constant(style_in.clone());
                let (s, w) = model::gst_style_embedding(g, &c, x);
                let a = probe(g, s, 25);
                let b = probe(g, w, 26);
                g.add(a, b)
            },
            coords,
            6,
        ),
    ));
    out.push((
        "style fusion",
        grad_check(
            &p.store,
            &|g| {
                let k = g.constant(kv.clone());
                let v = g.constant(kv.map(|x| 0.5 - x));
                let s = g.constant(style_in.clone());
                let (k2, v2) = model::fuse_style(g, &c, k, v, s);
                let both = g.concat_cols(&[k2, v2]);
                probe(g, both, 27)
            },
            coords,
            7,
        ),
    ));
    let target_c = random_tensor(&[5, 80], 8, 0.0, 1.0);
    let target_m = random_tensor(&[18, 80], 9, 0.0, 1.0);
    out.push((
        "composite loss",
        grad_check(
            &p.store,
            &|g| {
                let o = model::forward_graph(
                    g,
                    &c,
                    &seq,
                    0.4,
                    &teacher,
                    StyleSource::Reference(&reference),
                )
                .unwrap();
                let lc = g.spec_loss(o.coarse, target_c.clone(), None, 400.0);
                let mel = g.slice_rows(o.mel, 0, 18);
                let lm = g.spec_loss(mel, target_m.clone(), None, 1440.0);
                let lc = g.scale(lc, 0.7);
                g.add(lc, lm)
            },
            coords,
            8,
        ),
    ));
    out
}

/// Changing teacher frame `t` leaves audio-encoder and decoder outputs
/// before `t` bit-identical.
pub fn check_causality() -> Result<(), String> {
    let p = tiny_params(false, 5);
    let cfg = &p.config;
    let x = random_tensor(&[9, 80], 1, 0.0, 1.0);
    let h = random_tensor(&[9, 2 * cfg.hidden_dim], 2, -1.0, 1.0);
    for t in [0, 4, 8] {
        let mut x2 = x.clone();
        let mut h2 = h.clone();
        for v in x2.row_mut(t) {
            *v = 1.0 - *v;
        }
        for v in h2.row_mut(t) {
            *v += 3.0;
        }
        let run = |inp: &Tensor, dec: bool| {
            let mut g = Graph::new(&p.store);
            let i = g.constant(inp.clone());
            let o = if dec {
                model::decode(&mut g, cfg, i)
            } else {
                model::audio_encode(&mut g, cfg, i)
            };
            g.value(o).clone()
        };
        for dec in [false, true] {
            let (a, b) = if dec {
                (run(&h, true), run(&h2, true))
            } else {
                (run(&x, false), run(&x2, false))
            };
            if a.slice_rows(0, t) != b.slice_rows(0, t) {
                return Err(format!(
                    "perturbing step {t} changed earlier outputs (decoder: {dec})"
                ));
            }
            if a.slice_rows(t, t + 1) == b.slice_rows(t, t + 1) {
                return Err(format!(
                    "perturbing step {t} had no effect (decoder: {dec})"
                ));
            }
        }
    }
    Ok(())
}

pub fn check_attention_rows() -> Result<(), String> {
    let st = stats();
    for seed in 0..5 {
        let p = tiny_params(seed % 2 == 0, seed);
        let seq = sequence(3 + seed as usize, 12, seed);
        let teacher = random_tensor(&[7, 80], seed, 0.0, 1.0);
        let reference = random_tensor(&[30, 80], seed + 1, 0.0, 1.0);
        let out = model::forward_t2m(&seq, 7.0 + seed as f64, &st, &teacher, Some(&reference), &p)
            .map_err(|e| e.to_string())?;
        let a = out.attention.values();
        for t in 0..a.rows() {
            let s: f64 = a.row(t).iter().sum();
            if (s - 1.0).abs() > 1e-6 || a.row(t).iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(format!("attention row {t} sums to {s}"));
            }
        }
    }
    Ok(())
}

pub fn check_postnet_length() -> Result<(), String> {
    let p = tiny_params(false, 3);
    for tc in [1, 2, 5, 6, 13] {
        let mut g = Graph::new(&p.store);
        let x = g.constant(random_tensor(&[tc, 80], tc as u64, 0.0, 1.0));
        let y = model::postnet(&mut g, &p.config, x);
        let shape = g.shape(y).to_vec();
        if shape != [4 * tc, 80] {
            return Err(format!("coarse length {tc} gave {shape:?}"));
        }
    }
    Ok(())
}

pub fn check_gst_simplex() -> Result<(), String> {
    let p = tiny_params(true, 9);
    for seed in 0..10 {
        let mut g = Graph::new(&p.store);
        let x = g.constant(random_tensor(&[1, p.config.style_dim], seed, -3.0, 3.0));
        let (_, w) = model::gst_style_embedding(&mut g, &p.config, x);
        let w = g.value(w);
        for h in 0..w.rows() {
            let s: f64 = w.row(h).iter().sum();
            if (s - 1.0).abs() > 1e-6 || w.row(h).iter().any(|&x| x < 0.0) {
                return Err(format!("head {h} weights sum to {s}"));
            }
        }
    }
    Ok(())
}

pub fn check_eval_determinism() -> Result<(), String> {
    let p = tiny_params(true, 2);
    let seq = sequence(5, 12, 3);
    let teacher = random_tensor(&[6, 80], 4, 0.0, 1.0);
    let reference = random_tensor(&[25, 80], 5, 0.0, 1.0);
    let a = model::forward_t2m(&seq, 8.0, &stats(), &teacher, Some(&reference), &p)
        .map_err(|e| e.to_string())?;
    let b = model::forward_t2m(&seq, 8.0, &stats(), &teacher, Some(&reference), &p)
        .map_err(|e| e.to_string())?;
    if a != b {
        return Err("two evaluation passes differ".into());
    }
    Ok(())
}
