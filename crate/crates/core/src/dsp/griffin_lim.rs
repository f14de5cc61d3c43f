//! Phase reconstruction from a normalized mel spectrogram.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{denormalize_value, mel_filterbank};
use super::stft::{Spectrum, Stft};
use super::FeatureConfig;
use crate::nn::Tensor;

const MOMENTUM: f64 = 0.99;
const PHASE_SEED: u64 = 0x5eed;

/// Least-squares inverse of the mel filterbank, clipped to non-negative
/// magnitudes. Returns `T x (n_fft/2 + 1)`.
pub(crate) fn mel_to_linear(mel: &Tensor, cfg: &FeatureConfig) -> Tensor {
    let fb = mel_filterbank(
        cfg.sample_rate,
        cfg.fft_size,
        cfg.mel_bins,
        cfg.fmin,
        cfg.fmax,
    );
    let (bins, n) = (fb.rows(), fb.cols());
    let basis = DMatrix::from_row_slice(bins, n, fb.data());
    let pinv = basis
        .pseudo_inverse(1e-10)
        .expect("pseudo-inverse of a finite filterbank");
    let frames = mel.rows();
    let amp = DMatrix::from_fn(bins, frames, |b, t| {
        denormalize_value(mel.at(t, b), cfg.floor_db)
    });
    let linear = pinv * amp; // n x frames
    let mut out = Tensor::zeros(&[frames, n]);
    for t in 0..frames {
        for k in 0..n {
            out.set(t, k, linear[(k, t)].max(0.0));
        }
    }
    out
}

/// Fast Griffin-Lim with momentum. Output has `(T - 1) * hop` samples.
pub(crate) fn reconstruct(mel: &Tensor, cfg: &FeatureConfig) -> Vec<f64> {
    let mags = mel_to_linear(mel, cfg);
    let stft = Stft::new(cfg.fft_size, cfg.window, cfg.hop);
    let len = (mel.rows() - 1) * cfg.hop;
    let frames = mags.rows();
    let bins = mags.cols();

    let mut rng = ChaCha8Rng::seed_from_u64(PHASE_SEED);
    let mut angles: Spectrum = (0..frames)
        .map(|_| {
            (0..bins)
                .map(|_| Complex::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut prev: Spectrum = vec![vec![Complex::new(0.0, 0.0); bins]; frames];
    let apply = |angles: &Spectrum| -> Spectrum {
        angles
            .iter()
            .enumerate()
            .map(|(t, row)| {
                row.iter()
                    .enumerate()
                    .map(|(k, a)| a * mags.at(t, k))
                    .collect()
            })
            .collect()
    };
    let blend = MOMENTUM / (1.0 + MOMENTUM);
    for _ in 0..cfg.griffin_lim_iters {
        let signal = stft.inverse(&apply(&angles), len);
        let rebuilt = stft.forward(&signal);
        for t in 0..frames {
            for k in 0..bins {
                let a = rebuilt[t][k] - prev[t][k] * blend;
                let norm = a.norm();
                angles[t][k] = if norm > 1e-16 {
                    a / norm
                } else {
                    Complex::new(1.0, 0.0)
                };
            }
        }
        prev = rebuilt;
    }
    stft.inverse(&apply(&angles), len)
}
