use crate::nn::Tensor;

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_HZ / F_SP + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    let min_log_mel = MIN_LOG_HZ / F_SP;
    if mel < min_log_mel {
        mel * F_SP
    } else {
        MIN_LOG_HZ * (log_step() * (mel - min_log_mel)).exp()
    }
}

/// Triangular, area-normalized filters as a `mel_bins x (n_fft/2 + 1)` matrix.
pub fn mel_filterbank(
    sample_rate: u32,
    n_fft: usize,
    mel_bins: usize,
    fmin: f64,
    fmax: f64,
) -> Tensor {
    let bins = n_fft / 2 + 1;
    let lo = hz_to_mel(fmin);
    let hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(&[mel_bins, bins]);
    for m in 0..mel_bins {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (right - left);
        for k in 0..bins {
            let f = k as f64 * f64::from(sample_rate) / n_fft as f64;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            let w = rise.min(fall).max(0.0);
            if w > 0.0 {
                fb.set(m, k, w * enorm);
            }
        }
    }
    fb
}

/// Amplitude floor implied by the dB floor, e.g. `1e-5` for -100 dB.
pub(crate) fn amplitude_floor(floor_db: f64) -> f64 {
    10f64.powf(floor_db / 20.0)
}

pub(crate) fn normalize_value(x: f64, floor_db: f64) -> f64 {
    let db = 20.0 * x.max(amplitude_floor(floor_db)).log10();
    ((db - floor_db) / -floor_db).clamp(0.0, 1.0)
}

pub(crate) fn denormalize_value(v: f64, floor_db: f64) -> f64 {
    let db = v.clamp(0.0, 1.0) * -floor_db + floor_db;
    10f64.powf(db / 20.0)
}
