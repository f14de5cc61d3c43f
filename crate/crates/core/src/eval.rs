//! Objective analyses: corpus F0 against speaking rate, F0 of synthesized
//! speech across requested rates, and length-control accuracy.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::Dataset;
use crate::dsp::{self, FeatureConfig};
use crate::rate::{self, RateStats};
use crate::synth::{self, ReferenceInput, SynthesisRequest};
use crate::text::count_phonemes;
use crate::train::Checkpoint;
use crate::{Error, Result};

/// One utterance of the corpus scatter. `warning` is set, and the values are
/// NaN, when the utterance has no voiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub utt_id: String,
    pub sr: f64,
    pub mean_f0: f64,
    pub warning: Option<String>,
}

/// Speaking rate over voiced mel frames and mean voiced F0 of a waveform.
pub fn rate_and_f0(
    wave: &[f64],
    text: &str,
    cfg: &FeatureConfig,
    lambda: f64,
) -> Result<(f64, f64)> {
    let mel = dsp::mel_spectrogram(wave, cfg)?;
    let voiced = dsp::trim_silence(&mel, cfg.silence_threshold)?
        .into_iter()
        .filter(|&v| v)
        .count();
    let sr = rate::compute_sr(count_phonemes(text), voiced, lambda)?.r;
    let f0 = dsp::estimate_f0(wave, cfg)?
        .mean_voiced()
        .ok_or(Error::NoVoicedFrames)?;
    Ok((sr, f0))
}

/// Scatter rows from in-memory `(id, text, wave)` triples.
pub fn scatter_from_waves<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a str, &'a [f64])>,
    cfg: &FeatureConfig,
    lambda: f64,
) -> Result<Vec<ScatterRow>> {
    let mut rows = Vec::new();
    for (id, text, wave) in items {
        let row = match rate_and_f0(wave, text, cfg, lambda) {
            Ok((sr, mean_f0)) => ScatterRow {
                utt_id: id.to_string(),
                sr,
                mean_f0,
                warning: None,
            },
            Err(Error::NoVoicedFrames) => {
                log::warn!("utterance {id} has no voiced frames; skipped");
                ScatterRow {
                    utt_id: id.to_string(),
                    sr: f64::NAN,
                    mean_f0: f64::NAN,
                    warning: Some("no voiced frames".into()),
                }
            }
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn corpus_f0_sr_scatter(
    dataset: &Dataset,
    cfg: &FeatureConfig,
    lambda: f64,
) -> Result<Vec<ScatterRow>> {
    let waves = dataset
        .utterances
        .iter()
        .map(|u| dataset.load_wave(u))
        .collect::<Result<Vec<_>>>()?;
    scatter_from_waves(
        dataset
            .utterances
            .iter()
            .zip(&waves)
            .map(|(u, w)| (u.id.as_str(), u.text.as_str(), w.as_slice())),
        cfg,
        lambda,
    )
}

/// Pearson correlation of the finite pairs; NaN with fewer than two pairs or
/// zero variance.
pub fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let ok: Vec<_> = pairs
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if ok.len() < 2 {
        return f64::NAN;
    }
    let n = ok.len() as f64;
    let mx = ok.iter().map(|p| p.0).sum::<f64>() / n;
    let my = ok.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in ok {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn scatter_pearson(rows: &[ScatterRow]) -> f64 {
    let pairs: Vec<_> = rows.iter().map(|r| (r.sr, r.mean_f0)).collect();
    pearson(&pairs)
}

/// Least-squares slope of `y` on `x`.
pub fn fit_slope(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return f64::NAN;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pairs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Mean F0 of synthesized speech at one requested rate.
#[derive(Clone, Debug, PartialEq)]
pub struct F0SRRow {
    pub sr: f64,
    pub mean_f0: f64,
    pub ci95: f64,
    pub n: usize,
}

/// Mean and normal-approximation 95% half-width `1.96 * s / sqrt(n)`, using
/// the sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Default grid: 0.6 to 1.4 times the mean rate in steps of 0.2.
pub fn default_sr_grid(stats: &RateStats) -> Vec<f64> {
    [0.6, 0.8, 1.0, 1.2, 1.4]
        .iter()
        .map(|m| m * stats.mean_r)
        .collect()
}

/// Inference knobs shared by the analyses.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub max_frames_margin: f64,
    pub monotonic_attention: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_frames_margin: 1.3,
            monotonic_attention: false,
        }
    }
}

fn request(text: &str, reference: Option<&ReferenceInput>, opts: &EvalOptions) -> SynthesisRequest {
    SynthesisRequest {
        reference: reference.cloned(),
        max_frames_margin: opts.max_frames_margin,
        monotonic_attention: opts.monotonic_attention,
        ..SynthesisRequest::new(text)
    }
}

/// Synthesizes every text at every grid rate and aggregates the mean voiced
/// F0 of the vocoded output. Outputs without voiced F0 are left out of the
/// aggregate with a warning.
pub fn f0_sr_curve(
    ckpt: &Checkpoint,
    texts: &[String],
    sr_grid: &[f64],
    reference: Option<&ReferenceInput>,
    opts: &EvalOptions,
) -> Result<Vec<F0SRRow>> {
    if sr_grid.is_empty() {
        return Err(Error::EmptyInput("rate grid"));
    }
    if texts.is_empty() {
        return Err(Error::EmptyInput("text list"));
    }
    let mut rows = Vec::with_capacity(sr_grid.len());
    for &sr in sr_grid {
        let mut f0s = Vec::with_capacity(texts.len());
        for text in texts {
            let req = SynthesisRequest {
                sr: Some(sr),
                ..request(text, reference, opts)
            };
            let out = synth::synthesize(&req, ckpt)?;
            match dsp::estimate_f0(&out.wave, &ckpt.features)?.mean_voiced() {
                Some(f0) => f0s.push(f0),
                None => log::warn!("no voiced F0 for \"{text}\" at rate {sr}; excluded"),
            }
        }
        let (mean_f0, ci95) = mean_ci95(&f0s);
        rows.push(F0SRRow {
            sr,
            mean_f0,
            ci95,
            n: f0s.len(),
        });
    }
    Ok(rows)
}

/// Slope of mean F0 against requested rate over the finite rows.
pub fn f0_sr_slope(rows: &[F0SRRow]) -> f64 {
    let pairs: Vec<_> = rows
        .iter()
        .filter(|r| r.mean_f0.is_finite())
        .map(|r| (r.sr, r.mean_f0))
        .collect();
    fit_slope(&pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthControlRow {
    pub text_id: String,
    pub length_scale: f64,
    pub requested_r: f64,
    /// `lambda * P / voiced frames` of the output; NaN when nothing is voiced.
    pub achieved_r: f64,
    pub rel_error: f64,
    pub voiced_frames: usize,
    /// Generation stopped at the frame cap rather than on silence.
    pub hit_cap: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthReport {
    pub rows: Vec<LengthControlRow>,
    /// Per text: voiced length strictly increases with the length scale.
    pub monotone: Vec<(String, bool)>,
}

impl LengthReport {
    pub fn cap_hits(&self) -> usize {
        self.rows.iter().filter(|r| r.hit_cap).count()
    }

    pub fn monotone_fraction(&self) -> f64 {
        let ok = self.monotone.iter().filter(|(_, m)| *m).count();
        ok as f64 / self.monotone.len().max(1) as f64
    }

    /// Median relative error; rows without voiced output count as infinite.
    pub fn median_rel_error(&self) -> f64 {
        let mut errs: Vec<f64> = self
            .rows
            .iter()
            .map(|r| {
                if r.rel_error.is_finite() {
                    r.rel_error
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        if errs.is_empty() {
            return f64::NAN;
        }
        errs.sort_by(f64::total_cmp);
        let n = errs.len();
        if n % 2 == 1 {
            errs[n / 2]
        } else {
            (errs[n / 2 - 1] + errs[n / 2]) / 2.0
        }
    }
}

/// Achieved rate and relative error for an output with `voiced` frames.
pub fn length_row(
    text_id: &str,
    text: &str,
    length_scale: f64,
    requested_r: f64,
    voiced: usize,
    lambda: f64,
) -> Result<LengthControlRow> {
    let achieved_r = match rate::compute_sr(count_phonemes(text), voiced, lambda) {
        Ok(s) => s.r,
        Err(Error::NoVoicedFrames) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(LengthControlRow {
        text_id: text_id.to_string(),
        length_scale,
        requested_r,
        achieved_r,
        rel_error: (achieved_r - requested_r).abs() / requested_r,
        voiced_frames: voiced,
        hit_cap: false,
    })
}

/// Synthesizes each `(id, text)` at each length scale and measures the rate
/// of the generated mel over its voiced frames.
pub fn length_control_report(
    ckpt: &Checkpoint,
    texts: &[(String, String)],
    length_scales: &[f64],
    reference: Option<&ReferenceInput>,
    opts: &EvalOptions,
) -> Result<LengthReport> {
    if length_scales.is_empty() || texts.is_empty() {
        return Err(Error::EmptyInput("length scales or texts"));
    }
    let mut order: Vec<usize> = (0..length_scales.len()).collect();
    order.sort_by(|&a, &b| length_scales[a].total_cmp(&length_scales[b]));
    let mut rows = Vec::new();
    let mut monotone = Vec::new();
    for (id, text) in texts {
        let mut voiced = vec![0usize; length_scales.len()];
        for (i, &scale) in length_scales.iter().enumerate() {
            let req = SynthesisRequest {
                length_scale: Some(scale),
                ..request(text, reference, opts)
            };
            let out = synth::synthesize_mel(&req, ckpt)?;
            voiced[i] = dsp::trim_silence(&out.mel, ckpt.features.silence_threshold)?
                .into_iter()
                .filter(|&v| v)
                .count();
            rows.push(LengthControlRow {
                hit_cap: out.hit_cap,
                ..length_row(id, text, scale, out.r, voiced[i], ckpt.lambda)?
            });
        }
        let ok = order.windows(2).all(|w| voiced[w[0]] < voiced[w[1]]);
        monotone.push((id.clone(), ok));
    }
    Ok(LengthReport { rows, monotone })
}

fn write_csv(path: &Path, header: &str, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{header}").expect("write to memory");
    for l in lines {
        writeln!(buf, "{l}").expect("write to memory");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    write_csv(
        path,
        "utt_id,sr,mean_f0",
        rows.iter()
            .map(|r| format!("{},{},{}", r.utt_id, r.sr, r.mean_f0)),
    )
}

pub fn write_f0_sr_csv(path: &Path, rows: &[F0SRRow]) -> Result<()> {
    write_csv(
        path,
        "sr,mean_f0,ci95,n",
        rows.iter()
            .map(|r| format!("{},{},{},{}", r.sr, r.mean_f0, r.ci95, r.n)),
    )
}

pub fn write_length_csv(path: &Path, rows: &[LengthControlRow]) -> Result<()> {
    write_csv(
        path,
        "text_id,length_scale,requested_r,achieved_r,rel_error,voiced_frames,hit_cap",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.text_id,
                r.length_scale,
                r.requested_r,
                r.achieved_r,
                r.rel_error,
                r.voiced_frames,
                r.hit_cap
            )
        }),
    )
}
