//! Mono PCM16 RIFF/WAVE reading and writing.
//!
//! The surface is deliberately minimal: 16-bit signed little-endian PCM,
//! exactly one channel. Anything else is rejected with an error naming the
//! offending field. Conversion from other encodings is a user concern.

use std::path::Path;

use crate::{Error, Result};

/// A mono audio signal with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b: [u8; 4] = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::WavFormat(format!("truncated at byte {at}")))?
        .try_into()
        .unwrap();
    Ok(u32::from_le_bytes(b))
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16> {
    let b: [u8; 2] = bytes
        .get(at..at + 2)
        .ok_or_else(|| Error::WavFormat(format!("truncated at byte {at}")))?
        .try_into()
        .unwrap();
    Ok(u16::from_le_bytes(b))
}

/// Read a mono PCM16 RIFF/WAVE file.
///
/// Unknown chunks are skipped. Fails on non-PCM encodings, channel counts
/// other than one, bit depths other than 16, truncated chunks, and a
/// zero-length data chunk.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::WavFormat("missing RIFF/WAVE header".into()));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<Vec<f32>> = None;

    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::WavFormat(format!(
                "chunk {:?} claims {} bytes but only {} remain",
                String::from_utf8_lossy(id),
                size,
                bytes.len() - body
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::WavFormat("fmt chunk shorter than 16 bytes".into()));
                }
                let format = read_u16(&bytes, body)?;
                let channels = read_u16(&bytes, body + 2)?;
                let rate = read_u32(&bytes, body + 4)?;
                let bits = read_u16(&bytes, body + 14)?;
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                let (format, channels, _, bits) =
                    fmt.ok_or_else(|| Error::WavFormat("data chunk precedes fmt chunk".into()))?;
                if format != 1 {
                    return Err(Error::WavFormat(format!(
                        "audio format {format} is not PCM (1)"
                    )));
                }
                if channels != 1 {
                    return Err(Error::WavFormat(format!(
                        "expected 1 channel, file has {channels}"
                    )));
                }
                if bits != 16 {
                    return Err(Error::WavFormat(format!("expected 16-bit samples, got {bits}")));
                }
                if size == 0 {
                    return Err(Error::WavFormat("zero-length data chunk".into()));
                }
                if size % 2 != 0 {
                    return Err(Error::WavFormat("data chunk has an odd byte count".into()));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect();
                data = Some(samples);
            }
            _ => {}
        }
        // chunks are word-aligned
        pos = body + size + (size & 1);
    }

    let (_, _, rate, _) = fmt.ok_or_else(|| Error::WavFormat("no fmt chunk".into()))?;
    let samples = data.ok_or_else(|| Error::WavFormat("no data chunk".into()))?;
    Ok(Waveform::new(samples, rate))
}

/// Write a mono PCM16 RIFF/WAVE file. Samples are clamped to `[-1, 1]`.
pub fn write_wav(wave: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let n = wave.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, rate: u32) -> Waveform {
        let n = (secs * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| (0.8 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, rate)
    }

    #[test]
    fn round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let w = tone(1000.0, 0.1, 16000);
        write_wav(&w, &path).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert_eq!(r.samples.len(), w.samples.len());
        let max_err = w
            .samples
            .iter()
            .zip(&r.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 32768.0, "max_err = {max_err}");
    }

    #[test]
    fn stereo_rejected_naming_channel_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        // hand-build a 2-channel header with 4 bytes of data
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&40u32.to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes()); // stereo
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&64000u32.to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&4u32.to_le_bytes());
        out.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, out).unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains('2'), "{err}");
    }

    #[test]
    fn zero_length_data_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        let w = Waveform::new(vec![], 16000);
        write_wav(&w, &path).unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("zero-length"), "{err}");
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.wav");
        let w = tone(440.0, 0.05, 16000);
        write_wav(&w, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_wav(&path).is_err());
    }
}
