//! Sentence-level speaking rate: scaled phonemes per voiced frame.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default scaling factor applied to phonemes-per-frame.
pub const DEFAULT_LAMBDA: f64 = 100.0;

/// `r = lambda * P / T` for `P` phonemes spoken over `T` voiced frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakingRate {
    pub r: f64,
    pub lambda: f64,
    pub num_phonemes: usize,
    pub voiced_frames: usize,
}

/// Mean and population standard deviation of a set of speaking rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateStats {
    pub mean_r: f64,
    pub std_r: f64,
    pub n: usize,
}

impl RateStats {
    /// `std_r` is only meaningful with at least two rates.
    pub fn is_degenerate(&self) -> bool {
        self.n < 2
    }

    /// Standard score of `r`; errors when the spread is zero.
    pub fn standardize(&self, r: f64) -> Result<f64> {
        if !(self.std_r > 0.0) {
            return Err(Error::InvalidArgument(
                "rate statistics have zero spread; cannot standardize".into(),
            ));
        }
        Ok((r - self.mean_r) / self.std_r)
    }
}

pub fn compute_sr(num_phonemes: usize, voiced_frames: usize, lambda: f64) -> Result<SpeakingRate> {
    if voiced_frames == 0 {
        return Err(Error::NoVoicedFrames);
    }
    if num_phonemes == 0 {
        return Err(Error::InvalidArgument(
            "phoneme count must be at least 1".into(),
        ));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    Ok(SpeakingRate {
        r: lambda * num_phonemes as f64 / voiced_frames as f64,
        lambda,
        num_phonemes,
        voiced_frames,
    })
}

pub fn average_sr(rates: &[SpeakingRate]) -> Result<RateStats> {
    if rates.is_empty() {
        return Err(Error::EmptyInput("speaking rate list"));
    }
    let n = rates.len() as f64;
    let mean = rates.iter().map(|s| s.r).sum::<f64>() / n;
    let var = rates.iter().map(|s| (s.r - mean).powi(2)).sum::<f64>() / n;
    Ok(RateStats {
        mean_r: mean,
        std_r: var.sqrt(),
        n: rates.len(),
    })
}

/// Rate that stretches output duration by `length_scale` relative to normal.
pub fn length_scale_to_sr(stats: &RateStats, length_scale: f64) -> Result<f64> {
    if !(length_scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "length scale must be positive, got {length_scale}"
        )));
    }
    Ok(stats.mean_r / length_scale)
}

/// Voiced frames implied by a rate: `lambda * P / r`.
pub fn expected_frames(num_phonemes: usize, r: f64, lambda: f64) -> f64 {
    lambda * num_phonemes as f64 / r
}
