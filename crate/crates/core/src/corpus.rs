//! Datasets: JSONL manifests, random train/test splits, and a synthetic
//! corpus generator with known durations and pitch.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::dsp::FeatureConfig;
use crate::text::synthetic_symbol;
use crate::{Error, Result};

/// Ground truth recorded for generated utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Frames occupied by each token.
    pub token_durations: Vec<usize>,
    /// Utterance-level pitch shift in Hz.
    pub pitch_offset_hz: f64,
    pub speed_multiplier: f64,
    pub leading_silence: usize,
    pub trailing_silence: usize,
}

impl SynthTruth {
    pub fn total_frames(&self) -> usize {
        self.leading_silence + self.token_durations.iter().sum::<usize>() + self.trailing_silence
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio_path: PathBuf,
    /// Whitespace-separated phoneme symbols.
    pub text: String,
    pub meta: Option<SynthTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub sample_rate: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Loads the waveform of one utterance, checking its sample rate.
    pub fn load_wave(&self, utt: &Utterance) -> Result<Vec<f64>> {
        let (wave, sr) = audio::read_wav(&utt.audio_path)?;
        if sr != self.sample_rate {
            return Err(Error::SampleRateMismatch {
                path: utt.audio_path.clone(),
                expected: self.sample_rate,
                found: sr,
            });
        }
        Ok(wave)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    audio: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SynthTruth>,
}

/// Reads a JSON Lines manifest of `{id, audio, text}` records. Relative audio
/// paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path, sample_rate: u32) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    let mut utterances = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedManifest {
                line: line_no,
                message: e.to_string(),
            })?;
        if rec.text.split_whitespace().next().is_none() {
            return Err(Error::MalformedManifest {
                line: line_no,
                message: "empty text".into(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        let audio_path = base.join(&rec.audio);
        if !audio_path.is_file() {
            return Err(Error::MissingAudio(audio_path));
        }
        let found = audio::wav_sample_rate(&audio_path)?;
        if found != sample_rate {
            return Err(Error::SampleRateMismatch {
                path: audio_path,
                expected: sample_rate,
                found,
            });
        }
        utterances.push(Utterance {
            id: rec.id,
            audio_path,
            text: rec.text,
            meta: rec.meta,
        });
    }
    if utterances.is_empty() {
        return Err(Error::EmptyInput("manifest has no records"));
    }
    Ok(Dataset {
        utterances,
        sample_rate,
    })
}

/// Writes a manifest with audio paths relative to the manifest directory
/// where possible.
pub fn write_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for u in &dataset.utterances {
        let audio = u
            .audio_path
            .strip_prefix(base)
            .unwrap_or(&u.audio_path)
            .to_string_lossy()
            .into_owned();
        let rec = ManifestRecord {
            id: u.id.clone(),
            audio,
            text: u.text.clone(),
            meta: u.meta.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Uniform random split with `max(1, round(fraction * N))` test utterances.
/// Both halves keep manifest order.
pub fn split_dataset(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = d.len();
    let n_test = ((test_fraction * n as f64).round() as usize).max(1);
    if n < 2 || n_test >= n {
        return Err(Error::DatasetTooSmall(format!(
            "{n} utterance(s) cannot give a non-empty train and test split at fraction {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let pick = |want: bool| Dataset {
        utterances: d
            .utterances
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == want)
            .map(|(u, _)| u.clone())
            .collect(),
        sample_rate: d.sample_rate,
    };
    Ok((pick(false), pick(true)))
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_utterances: usize,
    pub inventory_size: usize,
    /// Inclusive token count range per utterance.
    pub tokens_per_utterance: [usize; 2],
    /// Frames per token at speed multiplier 1.
    pub base_token_duration: usize,
    pub speed_multiplier_range: [f64; 2],
    /// Centre pitch in Hz.
    pub pitch_base: f64,
    /// Correlation between utterance pitch offset and speed multiplier.
    pub pitch_speed_correlation: f64,
    /// Standard deviation of the utterance pitch offset in Hz.
    pub pitch_spread_hz: f64,
    /// Largest per-token pitch offset in Hz.
    pub token_pitch_spread_hz: f64,
    /// Inclusive range of leading and trailing silence in frames.
    pub silence_frames: [usize; 2],
    /// Peak amplitude of the summed harmonics.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_utterances: 200,
            inventory_size: 12,
            tokens_per_utterance: [3, 6],
            base_token_duration: 12,
            speed_multiplier_range: [0.6, 1.7],
            pitch_base: 150.0,
            pitch_speed_correlation: 0.0,
            pitch_spread_hz: 30.0,
            token_pitch_spread_hz: 8.0,
            silence_frames: [5, 20],
            amplitude: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let [lo, hi] = self.speed_multiplier_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("speed multiplier range must satisfy 0 < lo <= hi");
        }
        if self.inventory_size < 2 || self.inventory_size > 100 {
            return bad("inventory_size must lie in 2..=100");
        }
        if self.base_token_duration < 2 {
            return bad("base_token_duration must be at least 2 frames");
        }
        let [tmin, tmax] = self.tokens_per_utterance;
        if tmin == 0 || tmin > tmax {
            return bad("tokens_per_utterance must satisfy 1 <= min <= max");
        }
        if !(-1.0..=1.0).contains(&self.pitch_speed_correlation) {
            return bad("pitch_speed_correlation must lie in [-1, 1]");
        }
        if self.silence_frames[0] > self.silence_frames[1] {
            return bad("silence_frames must satisfy min <= max");
        }
        if self.num_utterances == 0 {
            return bad("num_utterances must be positive");
        }
        if !(self.pitch_base > 0.0 && self.amplitude > 0.0 && self.amplitude < 1.0) {
            return bad("pitch_base must be positive and amplitude in (0, 1)");
        }
        Ok(())
    }
}

/// A generated utterance held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub text: String,
    pub wave: Vec<f64>,
    pub truth: SynthTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub utterances: Vec<SyntheticUtterance>,
    pub sample_rate: u32,
}

impl SyntheticCorpus {
    /// Writes `wavs/<id>.wav` and `manifest.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Dataset> {
        let wav_dir = dir.join("wavs");
        fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
        let mut utterances = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let path = wav_dir.join(format!("{}.wav", u.id));
            audio::write_wav(&path, &u.wave, self.sample_rate)?;
            utterances.push(Utterance {
                id: u.id.clone(),
                audio_path: path,
                text: u.text.clone(),
                meta: Some(u.truth.clone()),
            });
        }
        let ds = Dataset {
            utterances,
            sample_rate: self.sample_rate,
        };
        write_manifest(&ds, &dir.join("manifest.jsonl"))?;
        Ok(ds)
    }
}

/// Fractional part of `k * phi`, a cheap low-discrepancy map from token index
/// to `[0, 1)`.
fn spread(k: usize, phi: f64) -> f64 {
    ((k as f64 + 1.0) * phi).fract()
}

/// Pitch offset in Hz that token `k` adds to the utterance pitch.
pub fn token_pitch_offset(k: usize, cfg: &SynthConfig) -> f64 {
    cfg.token_pitch_spread_hz * (2.0 * spread(k, 0.754_877_666_2) - 1.0)
}

/// Relative amplitudes of harmonics `1..` of token `k` at fundamental `f0`;
/// two spectral peaks whose positions depend on the token.
fn harmonic_template(k: usize, f0: f64, sample_rate: u32) -> Vec<f64> {
    let formant1 = 300.0 + 600.0 * spread(k, 0.618_033_988_7);
    let formant2 = 1100.0 + 1400.0 * spread(k, 0.414_213_562_4);
    let limit = (4000.0f64).min(f64::from(sample_rate) / 2.0 - f0);
    let count = (limit / f0).floor().max(1.0) as usize;
    (1..=count)
        .map(|h| {
            let f = h as f64 * f0;
            (-((f - formant1) / 180.0).powi(2)).exp()
                + 0.5 * (-((f - formant2) / 300.0).powi(2)).exp()
                + 0.08 / h as f64
        })
        .collect()
}

/// Generates the corpus in memory. Deterministic given `cfg.seed`.
pub fn generate_synthetic_corpus(
    cfg: &SynthConfig,
    features: &FeatureConfig,
) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [lo, hi] = cfg.speed_multiplier_range;
    let rho = cfg.pitch_speed_correlation;
    let mut utterances = Vec::with_capacity(cfg.num_utterances);
    for u in 0..cfg.num_utterances {
        let n_tokens = rng.gen_range(cfg.tokens_per_utterance[0]..=cfg.tokens_per_utterance[1]);
        let tokens: Vec<usize> = (0..n_tokens)
            .map(|_| rng.gen_range(0..cfg.inventory_size))
            .collect();
        let speed = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        // unit-variance monotone map of the speed multiplier
        let g = if hi > lo {
            3f64.sqrt() * (2.0 * (speed - lo) / (hi - lo) - 1.0)
        } else {
            0.0
        };
        let noise: f64 = rng.sample(StandardNormal);
        let pitch_offset = cfg.pitch_spread_hz * (rho * g + (1.0 - rho * rho).sqrt() * noise);
        let lead = rng.gen_range(cfg.silence_frames[0]..=cfg.silence_frames[1]);
        let trail = rng.gen_range(cfg.silence_frames[0]..=cfg.silence_frames[1]);
        let dur = ((cfg.base_token_duration as f64 / speed).round() as usize).max(1);
        let truth = SynthTruth {
            token_durations: vec![dur; n_tokens],
            pitch_offset_hz: pitch_offset,
            speed_multiplier: speed,
            leading_silence: lead,
            trailing_silence: trail,
        };
        let wave = render(&tokens, &truth, cfg, features);
        utterances.push(SyntheticUtterance {
            id: format!("syn{u:05}"),
            text: tokens
                .iter()
                .map(|&k| synthetic_symbol(k))
                .collect::<Vec<_>>()
                .join(" "),
            wave,
            truth,
        });
    }
    Ok(SyntheticCorpus {
        utterances,
        sample_rate: features.sample_rate,
    })
}

fn render(
    tokens: &[usize],
    truth: &SynthTruth,
    cfg: &SynthConfig,
    features: &FeatureConfig,
) -> Vec<f64> {
    let hop = features.hop;
    let sr = f64::from(features.sample_rate);
    let total = truth.total_frames() * hop;
    let mut wave = vec![0.0; total];
    let mut phases: Vec<f64> = Vec::new();
    let mut start = truth.leading_silence * hop;
    let voiced_end = start + truth.token_durations.iter().sum::<usize>() * hop;
    let voiced_start = start;
    // 5 ms fades at the edges of the voiced region
    let ramp = (0.005 * sr) as usize;
    for (&k, &d) in tokens.iter().zip(&truth.token_durations) {
        let f0 = cfg.pitch_base + token_pitch_offset(k, cfg) + truth.pitch_offset_hz;
        let mut amps = harmonic_template(k, f0, features.sample_rate);
        let norm: f64 = amps.iter().sum();
        for a in &mut amps {
            *a *= cfg.amplitude / norm;
        }
        if phases.len() < amps.len() {
            phases.resize(amps.len(), 0.0);
        }
        let end = start + d * hop;
        for (i, w) in wave[start..end].iter_mut().enumerate() {
            let n = start + i;
            let env = ((n - voiced_start) as f64 / ramp as f64)
                .min((voiced_end - n) as f64 / ramp as f64)
                .min(1.0);
            let mut s = 0.0;
            for (h, (a, ph)) in amps.iter().zip(phases.iter_mut()).enumerate() {
                s += a * ph.sin();
                *ph += std::f64::consts::TAU * (h + 1) as f64 * f0 / sr;
                if *ph > std::f64::consts::TAU {
                    *ph -= std::f64::consts::TAU;
                }
            }
            *w = env * s;
        }
        start = end;
    }
    wave
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_utterances: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn durations_follow_the_speed_rule() {
        let cfg = SynthConfig {
            num_utterances: 3,
            speed_multiplier_range: [2.0, 2.0],
            base_token_duration: 10,
            ..SynthConfig::default()
        };
        let c = generate_synthetic_corpus(&cfg, &FeatureConfig::default()).unwrap();
        for u in &c.utterances {
            assert!(u.truth.token_durations.iter().all(|&d| d == 5));
            assert_eq!(u.truth.speed_multiplier, 2.0);
        }
    }

    #[test]
    fn generation_is_bit_identical_for_a_seed() {
        let f = FeatureConfig::default();
        let a = generate_synthetic_corpus(&small_cfg(), &f).unwrap();
        let b = generate_synthetic_corpus(&small_cfg(), &f).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(
            &SynthConfig {
                seed: 9,
                ..small_cfg()
            },
            &f,
        )
        .unwrap();
        assert_ne!(a.utterances[0].wave, c.utterances[0].wave);
    }

    #[test]
    fn waveform_length_matches_truth() {
        let f = FeatureConfig::default();
        let c = generate_synthetic_corpus(&small_cfg(), &f).unwrap();
        for u in &c.utterances {
            let frames = f.frame_count(u.wave.len());
            assert!(frames.abs_diff(u.truth.total_frames()) <= 1);
            assert!(u.wave.iter().all(|s| s.abs() < 1.0));
            let lead = u.truth.leading_silence * f.hop;
            assert!(u.wave[..lead].iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let f = FeatureConfig::default();
        for cfg in [
            SynthConfig {
                speed_multiplier_range: [0.0, 1.0],
                ..small_cfg()
            },
            SynthConfig {
                inventory_size: 1,
                ..small_cfg()
            },
            SynthConfig {
                base_token_duration: 1,
                ..small_cfg()
            },
            SynthConfig {
                pitch_speed_correlation: 1.5,
                ..small_cfg()
            },
        ] {
            assert!(matches!(
                generate_synthetic_corpus(&cfg, &f),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    fn write_wav(dir: &Path, name: &str, sr: u32) -> PathBuf {
        let p = dir.join(name);
        audio::write_wav(&p, &[0.0; 64], sr).unwrap();
        p
    }

    #[test]
    fn manifest_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write_wav(d, "a.wav", 22050);
        write_wav(d, "b.wav", 22050);
        write_wav(d, "c.wav", 16000);
        let m = d.join("m.jsonl");
        fs::write(
            &m,
            concat!(
                r#"{"id":"u1","audio":"a.wav","text":"p01 p02"}"#,
                "\n",
                r#"{"id":"u2","audio":"b.wav","text":"p03"}"#,
                "\n",
                r#"{"id":"u3","audio":"a.wav","text":"p02 p02"}"#,
                "\n",
            ),
        )
        .unwrap();
        let ds = load_manifest(&m, 22050).unwrap();
        let ids: Vec<_> = ds.utterances.iter().map(|u| u.id.as_str()).collect();
        assert_eq!(ids, ["u1", "u2", "u3"]);

        fs::write(
            &m,
            concat!(
                r#"{"id":"u1","audio":"a.wav","text":"p01"}"#,
                "\n",
                r#"{"id":"u1","audio":"b.wav","text":"p01"}"#,
                "\n",
            ),
        )
        .unwrap();
        match load_manifest(&m, 22050) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "u1"),
            other => panic!("{other:?}"),
        }

        fs::write(&m, r#"{"id":"u1","audio":"zz.wav","text":"p01"}"#).unwrap();
        match load_manifest(&m, 22050) {
            Err(Error::MissingAudio(p)) => assert!(p.ends_with("zz.wav")),
            other => panic!("{other:?}"),
        }

        fs::write(
            &m,
            "{\"id\":\"u1\",\"audio\":\"a.wav\",\"text\":\"p01\"}\n{oops\n",
        )
        .unwrap();
        match load_manifest(&m, 22050) {
            Err(Error::MalformedManifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        fs::write(&m, r#"{"id":"u1","audio":"c.wav","text":"p01"}"#).unwrap();
        assert!(matches!(
            load_manifest(&m, 22050),
            Err(Error::SampleRateMismatch { .. })
        ));

        assert!(matches!(
            load_manifest(&d.join("none.jsonl"), 22050),
            Err(Error::MissingFile(_))
        ));
    }

    fn fake_dataset(n: usize) -> Dataset {
        Dataset {
            utterances: (0..n)
                .map(|i| Utterance {
                    id: format!("u{i}"),
                    audio_path: PathBuf::from(format!("{i}.wav")),
                    text: "p01".into(),
                    meta: None,
                })
                .collect(),
            sample_rate: 22050,
        }
    }

    #[test]
    fn one_percent_of_500_is_5() {
        let (train, test) = split_dataset(&fake_dataset(500), 0.01, 7).unwrap();
        assert_eq!((train.len(), test.len()), (495, 5));
        let again = split_dataset(&fake_dataset(500), 0.01, 7).unwrap();
        assert_eq!(again, (train, test));
        assert!(matches!(
            split_dataset(&fake_dataset(1), 0.01, 7),
            Err(Error::DatasetTooSmall(_))
        ));
        assert!(split_dataset(&fake_dataset(10), 0.0, 7).is_err());
        assert!(split_dataset(&fake_dataset(10), 1.0, 7).is_err());
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn split_is_disjoint_exhaustive_and_deterministic(
                n in 2usize..300, fraction in 0.01f64..0.6, seed in any::<u64>()
            ) {
                let d = fake_dataset(n);
                let (train, test) = split_dataset(&d, fraction, seed).unwrap();
                prop_assert_eq!(train.len() + test.len(), n);
                let expected = ((fraction * n as f64).round() as usize).max(1).min(n - 1);
                prop_assume!(((fraction * n as f64).round() as usize).max(1) < n);
                prop_assert_eq!(test.len(), expected);
                let mut ids: Vec<_> = train.utterances.iter().chain(&test.utterances).map(|u| u.id.clone()).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), n);
                prop_assert_eq!(split_dataset(&d, fraction, seed).unwrap(), (train, test));
            }
        }
    }
}
