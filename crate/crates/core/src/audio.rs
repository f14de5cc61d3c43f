//! 16-bit PCM mono WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::{Error, Result};

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::MissingFile(path.to_path_buf())
        }
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Reads a mono 16-bit PCM file into samples in `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: format!(
                "expected mono 16-bit PCM, found {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Ok((samples, spec.sample_rate))
}

/// Sample rate from the header only.
pub fn wav_sample_rate(path: &Path) -> Result<u32> {
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    Ok(reader.spec().sample_rate)
}

/// Writes samples as mono 16-bit PCM, clipping to the representable range.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        writer
            .write_sample(quantize(s))
            .map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

/// Nearest 16-bit code for a sample in `[-1, 1]`.
pub fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_is_exact_for_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..100)
            .map(|i| f64::from(quantize((i as f64 * 0.1).sin() * 0.5)) / 32768.0)
            .collect();
        write_wav(&path, &samples, 22050).unwrap();
        let (back, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 22050);
        assert_eq!(back, samples);
        assert_eq!(wav_sample_rate(&path).unwrap(), 22050);
    }

    #[test]
    fn missing_wav_reports_path() {
        let err = read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)), "{err}");
    }
}
