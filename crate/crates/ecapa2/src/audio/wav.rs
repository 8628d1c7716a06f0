//! Minimal RIFF/WAVE codec: 16-bit PCM, mono or stereo (downmixed).
//!
//! The decoder treats its input as untrusted: every read is bounds-checked
//! and malformed files come back as [`Error::Data`], never a panic.

use super::{resample_linear, Waveform, SAMPLE_RATE};
use crate::error::{data_err, Result};
use std::path::Path;

fn le_u16(b: &[u8], at: usize) -> Result<u16> {
    let s = b
        .get(at..at + 2)
        .ok_or_else(|| data_err(format!("wav truncated at byte {at}")))?;
    Ok(u16::from_le_bytes([s[0], s[1]]))
}

fn le_u32(b: &[u8], at: usize) -> Result<u32> {
    let s = b
        .get(at..at + 4)
        .ok_or_else(|| data_err(format!("wav truncated at byte {at}")))?;
    Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

struct Format {
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Decode a WAV byte stream into f64 samples in [-1, 1] plus its sample
/// rate. Stereo is downmixed by averaging the two channels.
pub fn decode_wav(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(data_err("not a RIFF/WAVE stream".to_string()));
    }
    let mut pos = 12usize;
    let mut fmt: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4)? as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or_else(|| data_err("wav chunk size overflow".to_string()))?;
        if body_end > bytes.len() {
            return Err(data_err(format!(
                "wav chunk '{}' of {size} bytes overruns the file",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(data_err("wav fmt chunk too small".to_string()));
                }
                let audio_format = le_u16(body, 0)?;
                if audio_format != 1 {
                    return Err(data_err(format!(
                        "unsupported wav format tag {audio_format} (PCM only)"
                    )));
                }
                fmt = Some(Format {
                    channels: le_u16(body, 2)?,
                    sample_rate: le_u32(body, 4)?,
                    bits: le_u16(body, 14)?,
                });
            }
            b"data" => {
                data = Some(body);
            }
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        pos = body_end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| data_err("wav without fmt chunk".to_string()))?;
    let data = data.ok_or_else(|| data_err("wav without data chunk".to_string()))?;
    if fmt.bits != 16 {
        return Err(data_err(format!("unsupported wav bit depth {} (16 only)", fmt.bits)));
    }
    if fmt.channels != 1 && fmt.channels != 2 {
        return Err(data_err(format!(
            "unsupported wav channel count {} (mono or stereo only)",
            fmt.channels
        )));
    }
    if fmt.sample_rate == 0 {
        return Err(data_err("wav with zero sample rate".to_string()));
    }
    let frame_bytes = 2 * fmt.channels as usize;
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(data_err("wav data chunk holds no complete frame".to_string()));
    }
    let mut samples = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let at = i * frame_bytes;
        let first = i16::from_le_bytes([data[at], data[at + 1]]) as f64 / 32768.0;
        let v = if fmt.channels == 2 {
            let second = i16::from_le_bytes([data[at + 2], data[at + 3]]) as f64 / 32768.0;
            (first + second) / 2.0
        } else {
            first
        };
        samples.push(v);
    }
    Ok((samples, fmt.sample_rate))
}

/// Encode samples as 16-bit PCM mono. Inputs hotter than full scale are
/// peak-normalized so the file never clips.
pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let peak = samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let data_bytes = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_bytes);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_bytes) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_bytes as u32).to_le_bytes());
    for &x in samples {
        let v = (x * scale * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Read a WAV file into a [`Waveform`], resampling to 16 kHz when needed.
/// The speaker id is left empty; dataset layers fill it from layout.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path)?;
    let (mut samples, rate) = decode_wav(&bytes)?;
    if rate != SAMPLE_RATE {
        samples = resample_linear(&samples, rate, SAMPLE_RATE);
    }
    let mut w = Waveform::new(samples, SAMPLE_RATE, "")?;
    w.source_path = path.display().to_string();
    Ok(w)
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    std::fs::write(path, encode_wav(samples, sample_rate))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_within_one_quantization_step() {
        let samples: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.013).sin() * 0.8).collect();
        let bytes = encode_wav(&samples, 16_000);
        let (back, rate) = decode_wav(&bytes).unwrap();
        assert_eq!(rate, 16_000);
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let samples: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).cos() * 0.5).collect();
        assert_eq!(encode_wav(&samples, 16_000), encode_wav(&samples, 16_000));
    }

    #[test]
    fn hot_input_is_peak_normalized() {
        let bytes = encode_wav(&[2.0, -2.0, 1.0], 16_000);
        let (back, _) = decode_wav(&bytes).unwrap();
        assert!((back[0] - 32767.0 / 32768.0).abs() < 1e-9);
        assert!((back[2] - 0.5 * 32767.0 / 32768.0).abs() < 1e-4);
    }

    #[test]
    fn stereo_downmixes_by_averaging() {
        // Hand-build a stereo file with L = 0.5, R = -0.5 throughout.
        let l = (0.5f64 * 32767.0) as i16;
        let r = (-0.5f64 * 32767.0) as i16;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 16).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16_000u32.to_le_bytes());
        bytes.extend_from_slice(&64_000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&l.to_le_bytes());
            bytes.extend_from_slice(&r.to_le_bytes());
        }
        let (samples, _) = decode_wav(&bytes).unwrap();
        assert_eq!(samples.len(), 4);
        for &s in &samples {
            assert!(s.abs() < 1e-4, "downmix of symmetric channels should cancel, got {s}");
        }
    }

    #[test]
    fn malformed_inputs_error_cleanly() {
        assert!(decode_wav(b"").is_err());
        assert!(decode_wav(b"RIFFxxxxWAVE").is_err());
        let good = encode_wav(&[0.1, 0.2, 0.3], 16_000);
        assert!(decode_wav(&good[..20]).is_err());
        let mut bad_size = good.clone();
        // Blow up the data chunk size field.
        let len = bad_size.len();
        bad_size[40..44].copy_from_slice(&(u32::MAX).to_le_bytes());
        assert!(decode_wav(&bad_size[..len]).is_err());
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let mut bytes = encode_wav(&[0.25; 8], 16_000);
        // Splice a LIST chunk between fmt and data.
        let mut spliced = bytes[..36].to_vec();
        spliced.extend_from_slice(b"LIST");
        spliced.extend_from_slice(&5u32.to_le_bytes());
        spliced.extend_from_slice(b"INFOx");
        spliced.push(0); // pad byte for odd size
        spliced.extend_from_slice(&bytes[36..]);
        let riff_size = (spliced.len() - 8) as u32;
        spliced[4..8].copy_from_slice(&riff_size.to_le_bytes());
        bytes = spliced;
        let (samples, _) = decode_wav(&bytes).unwrap();
        assert_eq!(samples.len(), 8);
    }
}
