//! Toy additive synthesizer standing in for a neural decoder.
//!
//! Frame dimension `i` drives a sinusoid at `base_hz · (i + 1)` with the
//! frame value as amplitude. Frames are spaced one frame period apart and
//! cross-faded with triangular windows (overlap-add with 50% overlap), so a
//! run of identical frames yields a steady tone. Output is scaled by
//! `gain / d`, clipped to [-1, 1] and written as 16-bit mono PCM.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no frames to synthesize")]
    Empty,
    #[error("sample rate {sample_rate} is not a multiple of {steps_per_second} steps/s")]
    RateMismatch { sample_rate: u32, steps_per_second: u32 },
    #[error("wav io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub steps_per_second: u32,
    pub base_hz: f64,
    pub gain: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            steps_per_second: 75,
            base_hz: 80.0,
            gain: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn samples_per_frame(&self) -> Result<usize, SynthError> {
        if self.steps_per_second == 0 || !self.sample_rate.is_multiple_of(self.steps_per_second) {
            return Err(SynthError::RateMismatch {
                sample_rate: self.sample_rate,
                steps_per_second: self.steps_per_second,
            });
        }
        Ok((self.sample_rate / self.steps_per_second) as usize)
    }

    /// Frequency in Hz of frame dimension `bin`.
    pub fn bin_frequency(&self, bin: usize) -> f64 {
        self.base_hz * (bin + 1) as f64
    }
}

/// Render frames to samples in [-1, 1].
pub fn render_samples(frames: &[Vec<f64>], config: &SynthConfig) -> Result<Vec<f32>, SynthError> {
    if frames.is_empty() {
        return Err(SynthError::Empty);
    }
    let hop = config.samples_per_frame()?;
    let dim = frames[0].len();
    let scale = config.gain / dim.max(1) as f64;
    let omegas: Vec<f64> = (0..dim)
        .map(|i| TAU * config.bin_frequency(i) / f64::from(config.sample_rate))
        .collect();
    let mut out = Vec::with_capacity(frames.len() * hop);
    for (i, frame) in frames.iter().enumerate() {
        let next = frames.get(i + 1).unwrap_or(frame);
        for n in 0..hop {
            let t = (i * hop + n) as f64;
            let fade = n as f64 / hop as f64;
            let mut acc = 0.0;
            for (b, w) in omegas.iter().enumerate() {
                let amp = (1.0 - fade) * frame[b] + fade * next[b];
                if amp != 0.0 {
                    acc += amp * (w * t).sin();
                }
            }
            out.push((acc * scale).clamp(-1.0, 1.0) as f32);
        }
    }
    Ok(out)
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<(), SynthError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| SynthError::Io(e.to_string());
    let mut writer = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in samples {
        writer.write_sample(pcm16(s)).map_err(io)?;
    }
    writer.finalize().map_err(io)
}

/// WAV bytes in memory, for serving clips over HTTP.
pub fn wav_bytes(samples: &[f32], sample_rate: u32) -> Result<Vec<u8>, SynthError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| SynthError::Io(e.to_string());
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).map_err(io)?;
        for &s in samples {
            writer.write_sample(pcm16(s)).map_err(io)?;
        }
        writer.finalize().map_err(io)?;
    }
    Ok(cursor.into_inner())
}

fn pcm16(s: f32) -> i16 {
    (s * f32::from(i16::MAX)).round() as i16
}

/// Synthesize and write a WAV file, returning the number of samples.
pub fn export_wav(path: impl AsRef<Path>, frames: &[Vec<f64>], config: &SynthConfig) -> Result<usize, SynthError> {
    let samples = render_samples(frames, config)?;
    write_wav(path, &samples, config.sample_rate)?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_are_silent() {
        let s = render_samples(&vec![vec![0.0; 8]; 10], &SynthConfig::default()).unwrap();
        assert_eq!(s.len(), 3200);
        assert!(s.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_hot_is_a_pure_tone() {
        let cfg = SynthConfig::default();
        let mut frame = vec![0.0; 8];
        frame[2] = 1.0;
        let s = render_samples(&vec![frame; 75], &cfg).unwrap();
        let f = cfg.bin_frequency(2);
        assert_eq!(f, 240.0);
        for (n, &x) in s.iter().enumerate().step_by(97) {
            let expected = (TAU * f * n as f64 / 24_000.0).sin() / 8.0;
            assert!((f64::from(x) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn duration_follows_frame_count() {
        let cfg = SynthConfig::default();
        let s = render_samples(&vec![vec![0.1; 8]; 11_250], &cfg).unwrap();
        assert_eq!(s.len() as f64 / 24_000.0, 150.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(render_samples(&[], &SynthConfig::default()), Err(SynthError::Empty)));
        let cfg = SynthConfig { steps_per_second: 77, ..SynthConfig::default() };
        assert!(matches!(render_samples(&[vec![0.0]], &cfg), Err(SynthError::RateMismatch { .. })));
    }

    #[test]
    fn wav_header() {
        let bytes = wav_bytes(&[0.0, 0.5, -0.5], 24_000).unwrap();
        assert_eq!(&bytes[..4], b"RIFF");
        assert_eq!(bytes.len(), 44 + 6);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 24_000);
    }
}
