//! Signal processing: log-mel analysis, coarse decimation, silence detection,
//! F0 tracking, and Griffin-Lim inversion.

mod f0;
mod griffin_lim;
mod mel;
mod melfile;
mod stft;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{Error, Result};

pub use f0::{F0_MAX_HZ, F0_MIN_HZ, F0_WINDOW_SECS};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz};
pub use melfile::{read_mel, write_mel};

/// Analysis parameters shared by feature extraction and waveform inversion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    /// Hann window length in samples.
    pub window: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// dB level mapped to 0 by normalization; 0 dB maps to 1.
    pub floor_db: f64,
    /// Mel frames per coarse frame.
    pub coarse_factor: usize,
    /// Frame-mean level (normalized units) separating silence from speech.
    pub silence_threshold: f64,
    pub griffin_lim_iters: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            fft_size: 1024,
            hop: 256,
            window: 1024,
            mel_bins: 80,
            fmin: 0.0,
            fmax: 8000.0,
            floor_db: -100.0,
            coarse_factor: 4,
            silence_threshold: 0.05,
            griffin_lim_iters: 32,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.hop <= self.window && self.window <= self.fft_size) {
            return bad(format!(
                "need hop <= window <= fft_size, got {} / {} / {}",
                self.hop, self.window, self.fft_size
            ));
        }
        if self.hop == 0 || !self.fft_size.is_multiple_of(2) {
            return bad("hop must be positive and fft_size even".into());
        }
        if self.mel_bins == 0 {
            return bad("mel_bins must be at least 1".into());
        }
        if self.coarse_factor == 0 {
            return bad("coarse_factor must be at least 1".into());
        }
        if !(self.fmin >= 0.0
            && self.fmin < self.fmax
            && self.fmax <= f64::from(self.sample_rate) / 2.0)
        {
            return bad(format!("invalid mel band {}..{} Hz", self.fmin, self.fmax));
        }
        if !(self.floor_db < 0.0) {
            return bad("floor_db must be negative".into());
        }
        if !(self.silence_threshold > 0.0 && self.silence_threshold < 1.0) {
            return bad("silence_threshold must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Frames produced for `samples` input samples.
    pub fn frame_count(&self, samples: usize) -> usize {
        1 + samples / self.hop
    }
}

/// Normalized log-mel spectrogram, `T x mel_bins`, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Tensor,
    config: FeatureConfig,
}

impl MelSpectrogram {
    pub fn new(values: Tensor, config: FeatureConfig) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() == 0 {
            return Err(Error::EmptyInput(
                "mel spectrogram needs at least one frame",
            ));
        }
        if values.cols() != config.mel_bins {
            return Err(Error::ShapeMismatch(format!(
                "mel has {} bins, config expects {}",
                values.cols(),
                config.mel_bins
            )));
        }
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "mel entries must lie in [0, 1], found {v}"
            )));
        }
        Ok(Self { values, config })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Mel spectrogram decimated along time.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseMel {
    pub values: Tensor,
    pub factor: usize,
}

/// Per-frame F0 in Hz, 0 for unvoiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct F0Track {
    pub values: Vec<f64>,
    pub frame_hop: usize,
}

impl F0Track {
    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|&f| f > 0.0)
    }

    /// Mean over voiced frames, `None` when nothing is voiced.
    pub fn mean_voiced(&self) -> Option<f64> {
        let (sum, n) = self
            .voiced()
            .fold((0.0, 0usize), |(s, n), f| (s + f, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Magnitude mel spectrogram before normalization, `T x mel_bins`.
pub fn amplitude_mel(wave: &[f64], cfg: &FeatureConfig) -> Result<Tensor> {
    if wave.is_empty() {
        return Err(Error::EmptyInput("waveform"));
    }
    let stft = stft::Stft::new(cfg.fft_size, cfg.window, cfg.hop);
    let spec = stft.forward(wave);
    let fb = mel_filterbank(
        cfg.sample_rate,
        cfg.fft_size,
        cfg.mel_bins,
        cfg.fmin,
        cfg.fmax,
    );
    let bins = stft.bins();
    let mut out = Tensor::zeros(&[spec.len(), cfg.mel_bins]);
    let mut mags = vec![0.0; bins];
    for (t, frame) in spec.iter().enumerate() {
        for (m, c) in mags.iter_mut().zip(frame) {
            *m = c.norm();
        }
        for b in 0..cfg.mel_bins {
            let row = fb.row(b);
            let v: f64 = row.iter().zip(&mags).map(|(w, m)| w * m).sum();
            out.set(t, b, v);
        }
    }
    Ok(out)
}

/// Log-mel analysis followed by [`normalize_mel`]; `1 + len / hop` frames.
pub fn mel_spectrogram(wave: &[f64], cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    let amp = amplitude_mel(wave, cfg)?;
    let values = normalize_mel_with_floor(&amp, cfg.floor_db)?;
    MelSpectrogram::new(values, *cfg)
}

/// `clip((20 log10(max(x, 1e-5)) + 100) / 100, 0, 1)` element-wise.
pub fn normalize_mel(amplitude: &Tensor) -> Result<Tensor> {
    normalize_mel_with_floor(amplitude, FeatureConfig::default().floor_db)
}

pub fn normalize_mel_with_floor(amplitude: &Tensor, floor_db: f64) -> Result<Tensor> {
    if let Some(v) = amplitude.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "mel amplitudes must be non-negative, found {v}"
        )));
    }
    Ok(amplitude.map(|x| mel::normalize_value(x, floor_db)))
}

/// Inverse of normalization (values at 0 map back to the amplitude floor).
pub fn denormalize_mel(values: &Tensor, floor_db: f64) -> Tensor {
    values.map(|v| mel::denormalize_value(v, floor_db))
}

/// Zero-pads to a multiple of the coarse factor and keeps the last frame of
/// every group.
pub fn coarsen(mel: &MelSpectrogram) -> CoarseMel {
    coarsen_values(mel.values(), mel.config().coarse_factor)
}

pub fn coarsen_values(values: &Tensor, factor: usize) -> CoarseMel {
    let t = values.rows();
    let bins = values.cols();
    let tc = t.div_ceil(factor);
    let mut out = Tensor::zeros(&[tc, bins]);
    for i in 0..tc {
        let src = (i + 1) * factor - 1;
        if src < t {
            out.row_mut(i).copy_from_slice(values.row(src));
        }
    }
    CoarseMel {
        values: out,
        factor,
    }
}

/// Frame `t` is voiced iff the mean over bins of `values[t, :]` reaches the
/// threshold.
pub fn trim_silence(mel: &MelSpectrogram, threshold: f64) -> Result<Vec<bool>> {
    voiced_mask(mel.values(), threshold)
}

pub fn voiced_mask(values: &Tensor, threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "silence threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let bins = values.cols() as f64;
    Ok((0..values.rows())
        .map(|t| values.row(t).iter().sum::<f64>() / bins >= threshold)
        .collect())
}

/// Rows from the first to the last voiced frame; all rows when none is voiced.
pub fn voiced_span(values: &Tensor, threshold: f64) -> Result<Tensor> {
    let mask = voiced_mask(values, threshold)?;
    let (Some(first), Some(last)) = (mask.iter().position(|&v| v), mask.iter().rposition(|&v| v))
    else {
        return Ok(values.clone());
    };
    let cols = values.cols();
    Ok(Tensor::new(
        &[last + 1 - first, cols],
        values.data()[first * cols..(last + 1) * cols].to_vec(),
    ))
}

/// Autocorrelation F0 per 25 ms window at hop stride, 50-500 Hz.
pub fn estimate_f0(wave: &[f64], cfg: &FeatureConfig) -> Result<F0Track> {
    if wave.is_empty() {
        return Err(Error::EmptyInput("waveform"));
    }
    Ok(F0Track {
        values: f0::track(wave, cfg.sample_rate, cfg.hop),
        frame_hop: cfg.hop,
    })
}

/// Waveform of `(T - 1) * hop` samples from a normalized mel spectrogram.
pub fn griffin_lim(mel: &MelSpectrogram, cfg: &FeatureConfig) -> Vec<f64> {
    griffin_lim::reconstruct(mel.values(), cfg)
}

/// Linear magnitudes recovered by the mel pseudo-inverse (diagnostics).
pub fn mel_to_linear(mel: &MelSpectrogram, cfg: &FeatureConfig) -> Tensor {
    griffin_lim::mel_to_linear(mel.values(), cfg)
}

/// Magnitude spectrum of a signal via one full-length FFT; used to find the
/// dominant frequency of reconstructed audio.
pub fn dominant_frequency(signal: &[f64], sample_rate: u32, n_fft: usize) -> f64 {
    let stft = stft::Stft::new(n_fft, n_fft, n_fft / 4);
    let spec = stft.forward(signal);
    let bins = stft.bins();
    let mut acc = vec![0.0; bins];
    for frame in &spec {
        for (a, c) in acc.iter_mut().zip(frame) {
            *a += c.norm();
        }
    }
    let k = acc
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(k, _)| k);
    k as f64 * f64::from(sample_rate) / n_fft as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, amp: f64) -> Vec<f64> {
        let sr = 22050.0;
        let n = (secs * sr) as usize;
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
            .collect()
    }

    fn mel_from(values: Tensor) -> MelSpectrogram {
        MelSpectrogram::new(values, FeatureConfig::default()).unwrap()
    }

    #[test]
    fn one_second_gives_87_frames() {
        let mel = mel_spectrogram(&sine(440.0, 1.0, 0.3), &FeatureConfig::default()).unwrap();
        assert_eq!(mel.frames(), 87);
        assert_eq!(mel.values().cols(), 80);
    }

    #[test]
    fn voiced_span_drops_outer_silence_only() {
        let levels = [0.0, 0.01, 0.5, 0.0, 0.6, 0.02, 0.0];
        let data: Vec<f64> = levels.iter().flat_map(|&v| [v; 4]).collect();
        let span = voiced_span(&Tensor::new(&[7, 4], data), 0.05).unwrap();
        assert_eq!(span.rows(), 3);
        assert_eq!(span.row(1), &[0.0; 4]);
        let quiet = Tensor::zeros(&[3, 4]);
        assert_eq!(voiced_span(&quiet, 0.05).unwrap(), quiet);
    }

    #[test]
    fn silent_input_normalizes_to_zero() {
        let mel = mel_spectrogram(&vec![0.0; 22050], &FeatureConfig::default()).unwrap();
        assert!(mel.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_wave_is_rejected() {
        assert!(matches!(
            mel_spectrogram(&[], &FeatureConfig::default()),
            Err(Error::EmptyInput(_))
        ));
        assert!(estimate_f0(&[], &FeatureConfig::default()).is_err());
    }

    #[test]
    fn normalization_reference_points() {
        let x = Tensor::new(&[1, 3], vec![1.0, 1e-5, 10f64.powf(-2.5)]);
        let v = normalize_mel(&x).unwrap();
        assert!((v.data()[0] - 1.0).abs() < 1e-12);
        assert!(v.data()[1].abs() < 1e-12);
        assert!((v.data()[2] - 0.5).abs() < 1e-12);
        let neg = Tensor::new(&[1, 1], vec![-0.1]);
        assert!(normalize_mel(&neg).is_err());
    }

    #[test]
    fn denormalize_inverts_normalize_inside_the_range() {
        let x = Tensor::new(&[1, 3], vec![0.5, 1e-3, 0.9]);
        let back = denormalize_mel(&normalize_mel(&x).unwrap(), -100.0);
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coarsen_takes_last_frame_of_each_group() {
        let values = Tensor::new(&[8, 80], (0..640).map(|i| (i / 80) as f64 / 10.0).collect());
        let c = coarsen(&mel_from(values));
        assert_eq!(c.values.rows(), 2);
        assert_eq!(c.values.at(0, 0), 0.3);
        assert_eq!(c.values.at(1, 5), 0.7);

        let values = Tensor::full(&[10, 80], 0.5);
        let c = coarsen(&mel_from(values.clone()));
        assert_eq!(c.values.rows(), 3);
        // group 3 covers frames 8..12, its last frame is padding
        assert!(c.values.row(2).iter().all(|&v| v == 0.0));

        let ident = coarsen_values(&values, 1);
        assert_eq!(ident.values, values);
    }

    #[test]
    fn trim_silence_cases() {
        let zeros = mel_from(Tensor::zeros(&[6, 80]));
        assert_eq!(
            trim_silence(&zeros, 0.05)
                .unwrap()
                .iter()
                .filter(|v| **v)
                .count(),
            0
        );
        let ones = mel_from(Tensor::full(&[6, 80], 1.0));
        assert!(trim_silence(&ones, 0.05).unwrap().iter().all(|v| *v));
        let mut half = Tensor::zeros(&[6, 80]);
        for t in 3..6 {
            half.row_mut(t).fill(1.0);
        }
        let mask = trim_silence(&mel_from(half), 0.05).unwrap();
        assert_eq!(mask, vec![false, false, false, true, true, true]);
        assert!(trim_silence(&ones, 0.0).is_err());
        assert!(trim_silence(&ones, 1.0).is_err());
    }

    #[test]
    fn f0_of_pure_tones() {
        let cfg = FeatureConfig::default();
        for (f, lo, hi) in [(220.0, 215.0, 225.0), (100.0, 95.0, 105.0)] {
            let track = estimate_f0(&sine(f, 1.0, 0.5), &cfg).unwrap();
            let mean = track.mean_voiced().unwrap();
            assert!(mean >= lo && mean <= hi, "{f} Hz -> {mean}");
        }
        let silent = estimate_f0(&vec![0.0; 22050], &cfg).unwrap();
        assert!(silent.values.iter().all(|&v| v == 0.0));
        assert_eq!(silent.mean_voiced(), None);
    }

    #[test]
    fn griffin_lim_of_silence_is_near_silent() {
        let mel = mel_from(Tensor::zeros(&[20, 80]));
        let wave = griffin_lim(&mel, &FeatureConfig::default());
        assert_eq!(wave.len(), 19 * 256);
        let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1e-3, "peak {peak}");
    }

    #[test]
    fn config_validation() {
        assert!(FeatureConfig::default().validate().is_ok());
        let bad = FeatureConfig {
            hop: 2048,
            ..FeatureConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FeatureConfig {
            coarse_factor: 0,
            ..FeatureConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
