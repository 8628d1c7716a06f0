//! STFT log-spectral features, mel filterbank, and the masking ops.

use super::{Waveform, SAMPLE_RATE};
use crate::error::{data_err, Error, Result};
use crate::rng::SeedRng;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::{Arc, OnceLock};

/// Analysis window length in samples: 25 ms at 16 kHz.
pub const FRAME_LEN: usize = 400;
/// Hop length in samples: 10 ms at 16 kHz.
pub const FRAME_SHIFT: usize = 160;
/// FFT size the window is zero-padded to.
pub const N_FFT: usize = 512;

const LOG_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Fft256,
    Mel80,
}

impl FeatureKind {
    pub fn bins(self) -> usize {
        match self {
            FeatureKind::Fft256 => 256,
            FeatureKind::Mel80 => 80,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Fft256 => "fft256",
            FeatureKind::Mel80 => "mel80",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fft256" => Ok(FeatureKind::Fft256),
            "mel80" => Ok(FeatureKind::Mel80),
            other => Err(Error::Usage(format!("unknown feature kind '{other}'"))),
        }
    }
}

/// Log-magnitude frequency-by-time grid, row-major with time fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub bins: Vec<f64>,
    pub f: usize,
    pub t: usize,
    pub kind: FeatureKind,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl FeatureMap {
    pub fn from_bins(kind: FeatureKind, bins: Vec<f64>, t: usize) -> Result<Self> {
        let f = kind.bins();
        if bins.len() != f * t {
            return Err(data_err(format!(
                "feature buffer of {} values does not fill {f} x {t}",
                bins.len()
            )));
        }
        if bins.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".to_string()));
        }
        Ok(FeatureMap { bins, f, t, kind, frame_length_ms: 25.0, frame_shift_ms: 10.0 })
    }

    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.bins[f * self.t + t]
    }

    pub fn mean(&self) -> f64 {
        self.bins.iter().sum::<f64>() / self.bins.len() as f64
    }

    /// CSV export: one metadata header line, then one row per frequency bin.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# kind={} f={} t={} frame_length_ms={} frame_shift_ms={}\n",
            self.kind.name(),
            self.f,
            self.t,
            self.frame_length_ms,
            self.frame_shift_ms
        );
        for f in 0..self.f {
            let row: Vec<String> =
                (0..self.t).map(|t| format!("{:.9e}", self.get(f, t))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn fft_plan() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT)).clone()
}

fn hamming() -> &'static [f64] {
    static WIN: OnceLock<Vec<f64>> = OnceLock::new();
    WIN.get_or_init(|| {
        (0..FRAME_LEN)
            .map(|i| {
                0.54 - 0.46
                    * (2.0 * std::f64::consts::PI * i as f64 / (FRAME_LEN - 1) as f64).cos()
            })
            .collect()
    })
}

/// Triangular mel filterbank over 0..sample_rate/2, as a dense
/// n_filters x n_bins weight matrix on the magnitude-bin grid.
pub fn mel_filterbank(n_filters: usize, n_bins: usize) -> Vec<f64> {
    let points = mel_points(n_filters);
    let mut weights = vec![0.0; n_filters * n_bins];
    for m in 0..n_filters {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for b in 0..n_bins {
            let p = b as f64;
            let w = if p >= lo && p <= mid {
                (p - lo) / (mid - lo).max(1e-12)
            } else if p > mid && p <= hi {
                (hi - p) / (hi - mid).max(1e-12)
            } else {
                0.0
            };
            weights[m * n_bins + b] = w;
        }
    }
    weights
}

/// Filter edge positions on the continuous magnitude-bin axis
/// (n_filters + 2 points, equally spaced on the mel scale).
fn mel_points(n_filters: usize) -> Vec<f64> {
    let hz_to_mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let mel_to_hz = |mel: f64| 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
    let hi_mel = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    (0..n_filters + 2)
        .map(|i| {
            let hz = mel_to_hz(hi_mel * i as f64 / (n_filters + 1) as f64);
            hz * N_FFT as f64 / SAMPLE_RATE as f64
        })
        .collect()
}

/// Center frequency in Hz of one mel filter, for test oracles and docs.
pub fn mel_filter_center_hz(index: usize, n_filters: usize) -> f64 {
    let points = mel_points(n_filters);
    points[index + 1] * SAMPLE_RATE as f64 / N_FFT as f64
}

/// 25 ms / 10 ms Hamming-window STFT features: 256 retained magnitude bins
/// (fft256) or 80 triangular mel filters (mel80), log-compressed and
/// mean-normalized per frequency bin over time.
pub fn stft_features(w: &Waveform, kind: FeatureKind) -> Result<FeatureMap> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(data_err(format!(
            "features need {SAMPLE_RATE} Hz input, got {}",
            w.sample_rate
        )));
    }
    let n = w.samples.len();
    if n < FRAME_LEN {
        return Err(data_err(format!(
            "utterance of {n} samples is shorter than one {FRAME_LEN}-sample frame"
        )));
    }
    let t_frames = 1 + (n - FRAME_LEN) / FRAME_SHIFT;
    let f_bins = kind.bins();
    let window = hamming();
    let plan = fft_plan();
    let mel = match kind {
        FeatureKind::Mel80 => Some(mel_filterbank(80, N_FFT / 2 + 1)),
        FeatureKind::Fft256 => None,
    };

    let mut bins = vec![0.0; f_bins * t_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut mags = vec![0.0; N_FFT / 2 + 1];
    for frame in 0..t_frames {
        let start = frame * FRAME_SHIFT;
        for i in 0..N_FFT {
            buf[i] = if i < FRAME_LEN {
                Complex::new(w.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        plan.process(&mut buf);
        for (k, m) in mags.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        match &mel {
            None => {
                for f in 0..256 {
                    bins[f * t_frames + frame] = (mags[f + 1] + LOG_FLOOR).ln();
                }
            }
            Some(weights) => {
                let nb = N_FFT / 2 + 1;
                for f in 0..80 {
                    let mut acc = 0.0;
                    for b in 0..nb {
                        acc += weights[f * nb + b] * mags[b];
                    }
                    bins[f * t_frames + frame] = (acc + LOG_FLOOR).ln();
                }
            }
        }
    }

    for f in 0..f_bins {
        let row = &mut bins[f * t_frames..(f + 1) * t_frames];
        let mean = row.iter().sum::<f64>() / t_frames as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }

    FeatureMap::from_bins(kind, bins, t_frames)
}

/// Mean of the cells outside the given rectangle; falls back to the global
/// mean when the rectangle covers the whole map. Filling with the
/// complement mean keeps masking the same window twice identical to once.
fn complement_mean(map: &FeatureMap, f0: usize, f1: usize, t0: usize, t1: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for f in 0..map.f {
        for t in 0..map.t {
            if f >= f0 && f < f1 && t >= t0 && t < t1 {
                continue;
            }
            sum += map.get(f, t);
            count += 1;
        }
    }
    if count == 0 {
        map.mean()
    } else {
        sum / count as f64
    }
}

/// Replace `count` consecutive frames starting at `start` with the mask
/// fill value.
pub fn mask_time(map: &FeatureMap, start: usize, count: usize) -> Result<FeatureMap> {
    if start + count > map.t {
        return Err(Error::Geometry(format!(
            "time mask [{start}, {}) exceeds {} frames",
            start + count,
            map.t
        )));
    }
    if count == 0 {
        return Ok(map.clone());
    }
    let fill = complement_mean(map, 0, map.f, start, start + count);
    let mut out = map.clone();
    for f in 0..map.f {
        for t in start..start + count {
            out.bins[f * map.t + t] = fill;
        }
    }
    Ok(out)
}

/// Replace `count` consecutive frequency bins starting at `start` with the
/// mask fill value.
pub fn mask_freq(map: &FeatureMap, start: usize, count: usize) -> Result<FeatureMap> {
    if start + count > map.f {
        return Err(Error::Geometry(format!(
            "frequency mask [{start}, {}) exceeds {} bins",
            start + count,
            map.f
        )));
    }
    if count == 0 {
        return Ok(map.clone());
    }
    let fill = complement_mean(map, start, start + count, 0, map.t);
    let mut out = map.clone();
    for f in start..start + count {
        for t in 0..map.t {
            out.bins[f * map.t + t] = fill;
        }
    }
    Ok(out)
}

/// One random time mask of width 0..=5 and one random frequency mask of
/// width 0..=32 (clipped to the map), filled like the mask_* ops.
pub fn spec_augment(map: &FeatureMap, rng: &mut SeedRng) -> Result<FeatureMap> {
    let tw = rng.gen_range(0..=5usize).min(map.t);
    let fw = rng.gen_range(0..=32usize).min(map.f);
    let ts = rng.gen_range(0..=map.t - tw);
    let fs = rng.gen_range(0..=map.f - fw);
    let masked = mask_time(map, ts, tw)?;
    mask_freq(&masked, fs, fw)
}
