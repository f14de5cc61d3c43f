use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Centered short-time Fourier transform with a periodic Hann window.
pub(crate) struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

pub(crate) type Spectrum = Vec<Vec<Complex<f64>>>;

impl Stft {
    pub fn new(n_fft: usize, win_length: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        let mut window = vec![0.0; n_fft];
        let offset = (n_fft - win_length) / 2;
        for i in 0..win_length {
            window[offset + i] =
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win_length as f64).cos();
        }
        Self {
            n_fft,
            hop,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Frames are centered at `t * hop`; the signal is zero-padded by
    /// `n_fft / 2` on both sides.
    pub fn forward(&self, signal: &[f64]) -> Spectrum {
        let pad = self.n_fft / 2;
        let frames = self.frames(signal.len());
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = (t * self.hop) as isize - pad as isize;
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let s = if idx >= 0 && (idx as usize) < signal.len() {
                    signal[idx as usize]
                } else {
                    0.0
                };
                *b = Complex::new(s * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            out.push(buf[..self.bins()].to_vec());
        }
        out
    }

    /// Weighted overlap-add inverse producing `len` samples.
    pub fn inverse(&self, spec: &Spectrum, len: usize) -> Vec<f64> {
        let pad = self.n_fft / 2;
        let total = (spec.len() - 1) * self.hop + self.n_fft;
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for (t, frame) in spec.iter().enumerate() {
            buf[..frame.len()].copy_from_slice(frame);
            // Hermitian completion of the upper half.
            for k in 1..self.n_fft - frame.len() + 1 {
                buf[self.n_fft - k] = frame[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                acc[start + i] += buf[i].re * scale * w;
                norm[start + i] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let j = i + pad;
                if j < total && norm[j] > 1e-8 {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}
