//! Frame-wise fundamental frequency via normalized autocorrelation.

/// Lowest and highest F0 searched, in Hz.
pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 500.0;
/// Analysis window length in seconds.
pub const F0_WINDOW_SECS: f64 = 0.025;

/// RMS below which a frame is treated as silent.
const ENERGY_FLOOR: f64 = 1e-3;
/// Minimum normalized autocorrelation for a frame to count as voiced.
const VOICING_THRESHOLD: f64 = 0.5;
/// Among peaks, the shortest lag within this fraction of the best wins.
/// Guards against picking a multiple of the true period.
const OCTAVE_TOLERANCE: f64 = 0.9;

pub(crate) fn track(wave: &[f64], sample_rate: u32, hop: usize) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let win = (F0_WINDOW_SECS * sr).round() as usize;
    let min_lag = (sr / F0_MAX_HZ).floor() as usize;
    let max_lag = ((sr / F0_MIN_HZ).ceil() as usize).min(win - win / 8);
    let frames = 1 + wave.len() / hop;
    let mut frame = vec![0.0; win];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let start = (t * hop) as isize - (win / 2) as isize;
        for (i, f) in frame.iter_mut().enumerate() {
            let idx = start + i as isize;
            *f = if idx >= 0 && (idx as usize) < wave.len() {
                wave[idx as usize]
            } else {
                0.0
            };
        }
        out.push(frame_f0(&frame, sr, min_lag, max_lag).unwrap_or(0.0));
    }
    out
}

fn frame_f0(frame: &[f64], sr: f64, min_lag: usize, max_lag: usize) -> Option<f64> {
    let n = frame.len();
    let energy: f64 = frame.iter().map(|x| x * x).sum();
    if (energy / n as f64).sqrt() < ENERGY_FLOOR {
        return None;
    }
    // prefix sums of squares for the per-lag normalization
    let mut sq = vec![0.0; n + 1];
    for (i, x) in frame.iter().enumerate() {
        sq[i + 1] = sq[i] + x * x;
    }
    let hi = max_lag + 1;
    let lo = min_lag.saturating_sub(1).max(1);
    let mut r = vec![0.0; hi + 1];
    for (lag, slot) in r.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let m = n - lag;
        let mut acc = 0.0;
        for i in 0..m {
            acc += frame[i] * frame[i + lag];
        }
        let e1 = sq[m];
        let e2 = sq[n] - sq[lag];
        let denom = (e1 * e2).sqrt();
        *slot = if denom > 0.0 { acc / denom } else { 0.0 };
    }

    let peaks: Vec<usize> = (min_lag.max(lo + 1)..max_lag)
        .filter(|&l| r[l] >= r[l - 1] && r[l] >= r[l + 1] && r[l] > 0.0)
        .collect();
    let best = peaks
        .iter()
        .map(|&l| r[l])
        .fold(f64::NEG_INFINITY, f64::max);
    if !(best >= VOICING_THRESHOLD) {
        return None;
    }
    let lag = *peaks.iter().find(|&&l| r[l] >= OCTAVE_TOLERANCE * best)?;

    // parabolic refinement
    let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let f0 = sr / (lag as f64 + shift);
    (F0_MIN_HZ..=F0_MAX_HZ).contains(&f0).then_some(f0)
}
