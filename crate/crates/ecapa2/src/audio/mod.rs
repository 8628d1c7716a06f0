//! Waveform ingestion and the feature/augmentation frontend.
//!
//! Audio flows through this module as [`Waveform`] values (f64 samples at
//! 16 kHz), gets turned into log-spectral [`FeatureMap`]s by
//! [`stft_features`], and can be perturbed on the way by the augmentation
//! ops (speed, crop, mixing, masking). Everything is a pure function of its
//! inputs plus an explicit RNG, so runs are reproducible from the seed.

mod augment;
mod features;
mod wav;

pub use augment::{add_noise, mix_waveforms, random_crop, resample_linear, reverb, speed_perturb};
pub use features::{
    mask_freq, mask_time, mel_filter_center_hz, mel_filterbank, spec_augment, stft_features,
    FeatureKind, FeatureMap, FRAME_LEN, FRAME_SHIFT, N_FFT,
};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

use crate::error::{data_err, Result};

/// The toolkit's fixed working sample rate.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono waveform with bookkeeping for dataset plumbing.
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_id: String,
    pub source_path: String,
}

impl Waveform {
    /// Validating constructor: non-empty, positive rate, samples finite and
    /// inside [-1, 1].
    pub fn new(samples: Vec<f64>, sample_rate: u32, speaker_id: &str) -> Result<Self> {
        if sample_rate == 0 {
            return Err(data_err("waveform with zero sample rate".to_string()));
        }
        if samples.is_empty() {
            return Err(data_err("empty waveform".to_string()));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(data_err(format!("waveform sample {bad} outside [-1, 1]")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
            speaker_id: speaker_id.to_string(),
            source_path: String::new(),
        })
    }

    /// Constructor for augmentation outputs, which may legitimately exceed
    /// [-1, 1] (for example RMS-normalized mixtures). Values must still be
    /// finite; the WAV encoder peak-normalizes on write.
    pub fn from_processed(samples: Vec<f64>, sample_rate: u32, speaker_id: &str) -> Result<Self> {
        if samples.is_empty() {
            return Err(data_err("empty waveform".to_string()));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(data_err(format!("non-finite waveform sample {bad}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
            speaker_id: speaker_id.to_string(),
            source_path: String::new(),
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        let e: f64 = self.samples.iter().map(|x| x * x).sum();
        (e / self.samples.len() as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_enforces_range() {
        assert!(Waveform::new(vec![0.5, -0.5], 16_000, "s").is_ok());
        assert!(Waveform::new(vec![1.5], 16_000, "s").is_err());
        assert!(Waveform::new(vec![], 16_000, "s").is_err());
        assert!(Waveform::new(vec![0.0], 0, "s").is_err());
    }

    #[test]
    fn from_processed_allows_hot_samples_but_not_nan() {
        assert!(Waveform::from_processed(vec![2.5, -3.0], 16_000, "s").is_ok());
        assert!(Waveform::from_processed(vec![f64::NAN], 16_000, "s").is_err());
    }

    #[test]
    fn duration_and_rms() {
        let w = Waveform::new(vec![0.5; 32_000], 16_000, "s").unwrap();
        assert!((w.duration_s() - 2.0).abs() < 1e-12);
        assert!((w.rms() - 0.5).abs() < 1e-12);
    }
}
