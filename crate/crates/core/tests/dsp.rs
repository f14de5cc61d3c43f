use proptest::prelude::*;
use sctts_core::corpus::{generate_synthetic_corpus, SynthConfig};
use sctts_core::dsp::{self, FeatureConfig, MelSpectrogram};
use sctts_core::nn::Tensor;

fn sine(freq: f64, samples: usize, amp: f64) -> Vec<f64> {
    (0..samples)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 22050.0).sin())
        .collect()
}

#[test]
fn f0_within_five_percent_on_pure_tones() {
    let cfg = FeatureConfig::default();
    for f in [80.0, 120.0, 220.0, 330.0] {
        let track = dsp::estimate_f0(&sine(f, 22050, 0.4), &cfg).unwrap();
        let mean = track.mean_voiced().unwrap();
        assert!((mean - f).abs() <= 0.05 * f, "{f} Hz -> {mean}");
    }
}

#[test]
fn griffin_lim_keeps_a_440_hz_peak() {
    let cfg = FeatureConfig::default();
    let mel = dsp::mel_spectrogram(&sine(440.0, 22050, 0.05), &cfg).unwrap();
    let wave = dsp::griffin_lim(&mel, &cfg);
    assert!(wave.len().abs_diff(mel.frames() * cfg.hop) <= cfg.hop);
    let peak = dsp::dominant_frequency(&wave, cfg.sample_rate, cfg.fft_size);
    let bin = f64::from(cfg.sample_rate) / cfg.fft_size as f64;
    assert!((peak - 440.0).abs() <= bin, "peak at {peak} Hz");
}

#[test]
fn griffin_lim_mel_round_trip_on_harmonic_input() {
    let cfg = FeatureConfig::default();
    let corpus = generate_synthetic_corpus(
        &SynthConfig {
            num_utterances: 3,
            seed: 5,
            ..SynthConfig::default()
        },
        &cfg,
    )
    .unwrap();
    for u in &corpus.utterances {
        let mel = dsp::mel_spectrogram(&u.wave, &cfg).unwrap();
        let wave = dsp::griffin_lim(&mel, &cfg);
        let again = dsp::mel_spectrogram(&wave, &cfg).unwrap();
        let n = mel.frames().min(again.frames());
        let mut total = 0.0;
        for t in 0..n {
            for (a, b) in mel.values().row(t).iter().zip(again.values().row(t)) {
                total += (a - b).abs();
            }
        }
        let mae = total / (n * cfg.mel_bins) as f64;
        assert!(mae < 0.1, "{}: mae {mae}", u.id);
    }
}

#[test]
fn mel_file_round_trip_is_float32_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mel");
    let values = Tensor::new(
        &[3, 80],
        (0..240).map(|i| f64::from(i as f32 / 240.0)).collect(),
    );
    dsp::write_mel(&path, &values).unwrap();
    assert_eq!(dsp::read_mel(&path).unwrap(), values);
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(dsp::read_mel(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn frame_count_formula(n in 1usize..20000, seed in 0u64..1000) {
        let cfg = FeatureConfig::default();
        let wave: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 40.0 - 0.2).collect();
        let mel = dsp::mel_spectrogram(&wave, &cfg).unwrap();
        prop_assert_eq!(mel.frames(), 1 + n / cfg.hop);
        prop_assert_eq!(cfg.frame_count(n), 1 + n / cfg.hop);
    }

    #[test]
    fn coarse_length_covers_the_mel(t in 1usize..200, factor in 1usize..6) {
        let values = Tensor::full(&[t, 80], 0.3);
        let tc = dsp::coarsen_values(&values, factor).values.rows();
        let slack = tc * factor - t;
        prop_assert!(slack < factor);
    }

    #[test]
    fn normalization_is_monotone_and_bounded(mut xs in prop::collection::vec(0.0f64..2.0, 2..40)) {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len();
        let out = dsp::normalize_mel(&Tensor::new(&[1, n], xs)).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn silence_mask_ignores_appended_silence(
        levels in prop::collection::vec(0.0f64..1.0, 1..30),
        extra in 1usize..10,
    ) {
        let cfg = FeatureConfig::default();
        let t = levels.len();
        let build = |rows: usize| {
            let mut v = Tensor::zeros(&[rows, 80]);
            for (i, &l) in levels.iter().enumerate() {
                v.row_mut(i).fill(l);
            }
            MelSpectrogram::new(v, cfg).unwrap()
        };
        let base = dsp::trim_silence(&build(t), 0.05).unwrap();
        let longer = dsp::trim_silence(&build(t + extra), 0.05).unwrap();
        prop_assert_eq!(base.len(), t);
        prop_assert_eq!(&longer[..t], &base[..]);
        prop_assert!(longer[t..].iter().all(|v| !v));
    }
}
