//! Autoregressive inference at a requested speaking rate.

use std::path::PathBuf;

use crate::audio;
use crate::dsp::{self, MelSpectrogram};
use crate::model::{self, argmax, AttentionMatrix, StyleSource};
use crate::nn::{softmax_in_place, Graph, Tensor};
use crate::rate::{self, RateStats};
use crate::train::Checkpoint;
use crate::{Error, Result};

/// Mel frames of silence that end generation once speech has started.
pub const STOP_SILENCE_FRAMES: usize = 10;

/// Coarse frames covering [`STOP_SILENCE_FRAMES`] mel frames.
pub fn stop_run(factor: usize) -> usize {
    STOP_SILENCE_FRAMES.div_ceil(factor.max(1))
}

/// Width of the monotonic attention window beyond the previous position.
pub const MONOTONIC_WINDOW: usize = 3;

/// Style input for models with style tokens.
#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceInput {
    Wav(PathBuf),
    /// Normalized mel, `T x bins`.
    Mel(Tensor),
    /// `num_heads x num_tokens`, rows on the simplex.
    TokenWeights(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    /// Whitespace-separated phoneme symbols.
    pub text: String,
    pub sr: Option<f64>,
    pub length_scale: Option<f64>,
    pub reference: Option<ReferenceInput>,
    pub max_frames_margin: f64,
    pub monotonic_attention: bool,
}

impl SynthesisRequest {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            sr: None,
            length_scale: None,
            reference: None,
            max_frames_margin: 1.3,
            monotonic_attention: false,
        }
    }
}

/// Target rate: the explicit value, the mean rate divided by the length
/// scale, or the mean rate.
pub fn resolve_sr(req: &SynthesisRequest, stats: &RateStats) -> Result<f64> {
    match (req.sr, req.length_scale) {
        (Some(_), Some(_)) => Err(Error::InvalidArgument(
            "sr and length_scale are mutually exclusive".into(),
        )),
        (Some(r), None) if r > 0.0 && r.is_finite() => Ok(r),
        (Some(r), None) => Err(Error::InvalidArgument(format!(
            "sr must be positive, got {r}"
        ))),
        (None, Some(s)) => rate::length_scale_to_sr(stats, s),
        (None, None) => Ok(stats.mean_r),
    }
}

/// Restricts an attention row to `[prev, prev + 3]` and renormalizes.
/// Returns the adjusted row and its argmax. When the window holds no mass
/// the row becomes one-hot at `prev + 1` (clamped to the last phoneme).
pub fn constrain_monotonic(row: &[f64], prev_pos: usize) -> Result<(Vec<f64>, usize)> {
    let p = row.len();
    if prev_pos >= p {
        return Err(Error::InvalidArgument(format!(
            "previous position {prev_pos} outside {p} phonemes"
        )));
    }
    let hi = (prev_pos + MONOTONIC_WINDOW).min(p - 1);
    let mut out = vec![0.0; p];
    let mass: f64 = row[prev_pos..=hi].iter().sum();
    if mass > 0.0 && mass.is_finite() {
        for i in prev_pos..=hi {
            out[i] = row[i] / mass;
        }
        let pos = argmax(&out);
        Ok((out, pos))
    } else {
        let pos = (prev_pos + 1).min(p - 1);
        out[pos] = 1.0;
        Ok((out, pos))
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    pub r: f64,
    pub coarse: Tensor,
    pub mel: MelSpectrogram,
    pub attention: AttentionMatrix,
    /// True when the frame cap stopped generation before a silence run.
    pub hit_cap: bool,
    /// Empty unless vocoded.
    pub wave: Vec<f64>,
}

/// Coarse-frame cap `ceil((lambda * P / r) * margin / factor)`.
pub fn frame_cap(num_phonemes: usize, r: f64, lambda: f64, margin: f64, factor: usize) -> usize {
    let frames = rate::expected_frames(num_phonemes, r, lambda) * margin;
    ((frames / factor as f64).ceil() as usize).max(1)
}

/// Voiced span of the reference mel, as seen by the style encoder in training.
fn reference_mel(input: &ReferenceInput, ckpt: &Checkpoint) -> Result<Option<Tensor>> {
    let mel = match input {
        ReferenceInput::Wav(path) => {
            let (wave, sr) = audio::read_wav(path)?;
            if sr != ckpt.features.sample_rate {
                return Err(Error::SampleRateMismatch {
                    path: path.clone(),
                    expected: ckpt.features.sample_rate,
                    found: sr,
                });
            }
            dsp::mel_spectrogram(&wave, &ckpt.features)?.into_values()
        }
        ReferenceInput::Mel(m) => m.clone(),
        ReferenceInput::TokenWeights(_) => return Ok(None),
    };
    Ok(Some(dsp::voiced_span(
        &mel,
        ckpt.features.silence_threshold,
    )?))
}

/// Generates coarse frames, upsamples them, and stops short of vocoding.
pub fn synthesize_mel(req: &SynthesisRequest, ckpt: &Checkpoint) -> Result<SynthesisOutput> {
    let cfg = &ckpt.params.config;
    let phonemes = ckpt.vocab.encode(&req.text)?;
    let r = resolve_sr(req, &ckpt.rate_stats)?;
    let z = ckpt.rate_stats.standardize(r)?;
    if !(req.max_frames_margin > 0.0) {
        return Err(Error::InvalidArgument(
            "max_frames_margin must be positive".into(),
        ));
    }
    let ref_mel = match &req.reference {
        Some(input) if cfg.use_gst => reference_mel(input, ckpt)?,
        _ => None,
    };
    let style = match (&req.reference, &ref_mel) {
        _ if !cfg.use_gst => StyleSource::None,
        (_, Some(m)) => StyleSource::Reference(m),
        (Some(ReferenceInput::TokenWeights(w)), None) => StyleSource::TokenWeights(w),
        _ => return Err(Error::MissingReference),
    };

    let store = &ckpt.params.store;
    let (keys, values) = {
        let mut g = Graph::new(store);
        let mem = model::encode_text(&mut g, cfg, &phonemes, z, style)?;
        (g.value(mem.keys).clone(), g.value(mem.values).clone())
    };
    let (p, d, bins) = (keys.rows(), cfg.hidden_dim, cfg.mel_bins);
    let cap = frame_cap(
        phonemes.phoneme_count.max(1),
        r,
        ckpt.lambda,
        req.max_frames_margin,
        cfg.coarse_factor,
    );
    let threshold = ckpt.features.silence_threshold;
    let stop_after = stop_run(cfg.coarse_factor);

    // teacher-style input: a zero frame followed by every generated frame
    let mut inputs = vec![0.0; bins];
    let mut contexts: Vec<f64> = Vec::with_capacity(cap * d);
    let mut attention: Vec<f64> = Vec::with_capacity(cap * p);
    let mut generated: Vec<f64> = Vec::with_capacity(cap * bins);
    let mut pos = 0usize;
    let mut spoke = false;
    let mut silent_run = 0usize;
    let mut hit_cap = true;
    for t in 0..cap {
        let mut g = Graph::new(store);
        let x = g.constant(Tensor::new(&[t + 1, bins], inputs.clone()));
        let q = model::audio_encode(&mut g, cfg, x);
        let q_last = g.value(q).row(t).to_vec();
        let mut row: Vec<f64> = (0..p)
            .map(|j| {
                q_last
                    .iter()
                    .zip(keys.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / (d as f64).sqrt()
            })
            .collect();
        softmax_in_place(&mut row);
        if req.monotonic_attention {
            let (adjusted, next) = constrain_monotonic(&row, pos)?;
            row = adjusted;
            pos = next;
        }
        for c in 0..d {
            contexts.push((0..p).map(|j| row[j] * values.at(j, c)).sum());
        }
        attention.extend_from_slice(&row);
        let ctx = g.constant(Tensor::new(&[t + 1, d], contexts.clone()));
        let rr = g.concat_cols(&[ctx, q]);
        let out = model::decode(&mut g, cfg, rr);
        let frame = g.value(out).row(t).to_vec();
        let mean = frame.iter().sum::<f64>() / bins as f64;
        generated.extend_from_slice(&frame);
        inputs.extend_from_slice(&frame);
        if mean >= threshold {
            spoke = true;
            silent_run = 0;
        } else if spoke {
            silent_run += 1;
            if silent_run >= stop_after {
                hit_cap = false;
                break;
            }
        }
    }
    if hit_cap {
        log::warn!(
            "generation for \"{}\" reached the {cap}-frame cap",
            req.text
        );
    }
    let steps = attention.len() / p;
    let coarse = Tensor::new(&[steps, bins], generated);
    let mel_values = {
        let mut g = Graph::new(store);
        let c = g.constant(coarse.clone());
        let m = model::postnet(&mut g, cfg, c);
        g.value(m).clone()
    };
    Ok(SynthesisOutput {
        r,
        coarse,
        mel: MelSpectrogram::new(mel_values, ckpt.features)?,
        attention: AttentionMatrix::new(Tensor::new(&[steps, p], attention)),
        hit_cap,
        wave: Vec::new(),
    })
}

/// Full synthesis: mel generation followed by Griffin-Lim.
pub fn synthesize(req: &SynthesisRequest, ckpt: &Checkpoint) -> Result<SynthesisOutput> {
    let mut out = synthesize_mel(req, ckpt)?;
    out.wave = dsp::griffin_lim(&out.mel, &ckpt.features);
    Ok(out)
}
