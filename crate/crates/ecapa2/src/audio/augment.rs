//! Waveform-domain augmentation: speed, crop, mixing, noise, reverb.

use super::Waveform;
use crate::error::{data_err, Result};
use crate::rng::SeedRng;
use rand::Rng;

const SILENCE_RMS: f64 = 1e-12;

/// Linear-interpolation resampler. The output has
/// round(n * to / from) samples; index i reads the source at i * from / to.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return samples.to_vec();
    }
    let n = samples.len();
    let out_len = ((n as f64) * to as f64 / from as f64).round().max(1.0) as usize;
    let step = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = pos.floor() as usize;
            if lo + 1 >= n {
                samples[n - 1]
            } else {
                let frac = pos - lo as f64;
                samples[lo] * (1.0 - frac) + samples[lo + 1] * frac
            }
        })
        .collect()
}

/// Speed perturbation by resampling the time axis: factor 1.1 plays the
/// clip 10% faster (shorter), 0.9 slower (longer). Each non-unit factor
/// yields a distinct speaker label by tagging the id.
pub fn speed_perturb(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(data_err(format!("speed factor {factor} must be positive")));
    }
    let n = w.samples.len();
    let out_len = ((n as f64 / factor).round() as usize).max(1);
    let samples: Vec<f64> = (0..out_len)
        .map(|i| {
            let pos = i as f64 * factor;
            let lo = pos.floor() as usize;
            if lo + 1 >= n {
                w.samples[n - 1]
            } else {
                let frac = pos - lo as f64;
                w.samples[lo] * (1.0 - frac) + w.samples[lo + 1] * frac
            }
        })
        .collect();
    let id = if factor == 1.0 {
        w.speaker_id.clone()
    } else {
        format!("{}#sp{}", w.speaker_id, factor)
    };
    let mut out = Waveform::from_processed(samples, w.sample_rate, &id)?;
    out.source_path = w.source_path.clone();
    Ok(out)
}

/// Crop a random window of the given duration. Shorter inputs are extended
/// by wrapping around, so the output length is always round(seconds * rate).
pub fn random_crop(w: &Waveform, seconds: f64, rng: &mut SeedRng) -> Result<Waveform> {
    if !(seconds.is_finite() && seconds > 0.0) {
        return Err(data_err(format!("crop length {seconds}s must be positive")));
    }
    let target = ((seconds * w.sample_rate as f64).round() as usize).max(1);
    let n = w.samples.len();
    let samples: Vec<f64> = if n >= target {
        let offset = rng.gen_range(0..=n - target);
        w.samples[offset..offset + target].to_vec()
    } else {
        (0..target).map(|i| w.samples[i % n]).collect()
    };
    let mut out = Waveform::from_processed(samples, w.sample_rate, &w.speaker_id)?;
    out.source_path = w.source_path.clone();
    Ok(out)
}

fn unit_rms(w: &Waveform, role: &str) -> Result<Vec<f64>> {
    let r = w.rms();
    if r < SILENCE_RMS {
        return Err(data_err(format!("{role} waveform is silent, cannot normalize energy")));
    }
    Ok(w.samples.iter().map(|x| x / r).collect())
}

/// Energy-controlled mixture: both inputs are RMS-normalized, the second is
/// cropped or wrapped to the first's length, and the sum
/// sqrt(lambda) * a + sqrt(1 - lambda) * b splits the energy exactly
/// lambda : (1 - lambda).
pub fn mix_waveforms(a: &Waveform, b: &Waveform, lambda: f64) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(data_err(format!("mixing weight {lambda} outside [0, 1]")));
    }
    if a.sample_rate != b.sample_rate {
        return Err(data_err(format!(
            "mixing inputs at different rates ({} vs {})",
            a.sample_rate, b.sample_rate
        )));
    }
    let an = unit_rms(a, "first mix")?;
    let bn = unit_rms(b, "second mix")?;
    let n = an.len();
    let wa = lambda.sqrt();
    let wb = (1.0 - lambda).sqrt();
    let samples: Vec<f64> =
        (0..n).map(|i| wa * an[i] + wb * bn[i % bn.len()]).collect();
    Waveform::from_processed(samples, a.sample_rate, &a.speaker_id)
}

/// Add a noise waveform at the requested signal-to-noise ratio in dB. The
/// noise is cropped or wrapped to the signal length and rescaled so
/// rms(signal) / rms(noise) = 10^(snr_db / 20).
pub fn add_noise(w: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if !snr_db.is_finite() {
        return Err(data_err(format!("non-finite snr {snr_db}")));
    }
    let rs = w.rms();
    let rn = noise.rms();
    if rs < SILENCE_RMS {
        return Err(data_err("signal waveform is silent, snr undefined".to_string()));
    }
    if rn < SILENCE_RMS {
        return Err(data_err("noise waveform is silent, snr undefined".to_string()));
    }
    let scale = rs / (rn * 10f64.powf(snr_db / 20.0));
    let n = w.samples.len();
    let samples: Vec<f64> = (0..n)
        .map(|i| w.samples[i] + scale * noise.samples[i % noise.samples.len()])
        .collect();
    let mut out = Waveform::from_processed(samples, w.sample_rate, &w.speaker_id)?;
    out.source_path = w.source_path.clone();
    Ok(out)
}

/// Convolve with an impulse response, truncated to the input length.
pub fn reverb(w: &Waveform, impulse: &[f64]) -> Result<Waveform> {
    if impulse.is_empty() {
        return Err(data_err("empty impulse response".to_string()));
    }
    if impulse.iter().any(|v| !v.is_finite()) {
        return Err(data_err("non-finite impulse response".to_string()));
    }
    let n = w.samples.len();
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let kmax = impulse.len().min(i + 1);
            (0..kmax).map(|k| impulse[k] * w.samples[i - k]).sum()
        })
        .collect();
    let mut out = Waveform::from_processed(samples, w.sample_rate, &w.speaker_id)?;
    out.source_path = w.source_path.clone();
    Ok(out)
}
