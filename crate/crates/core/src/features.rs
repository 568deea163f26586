//! Framing and log mel-filterbank energy extraction.
//!
//! A waveform is cut into Hann-windowed frames (25 ms / 10 ms hop by
//! default), each frame goes through a zero-padded DFT, and triangular
//! filters on the mel scale spanning 0 Hz to Nyquist pool the power
//! spectrum into `n_mels` bands. Energies are natural-log compressed with a
//! floor so silence stays finite.

use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::wav::Waveform;
use crate::{Error, Result};

/// Default mel band count.
pub const N_MELS: usize = 80;
/// Default analysis frame length in milliseconds.
pub const FRAME_MS: f64 = 25.0;
/// Default hop in milliseconds.
pub const HOP_MS: f64 = 10.0;
/// Energy floor applied before the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// A `D x T` matrix of log mel-filterbank energies, stored frame-major
/// (frame `t` is the contiguous slice `data[t*D .. (t+1)*D]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    n_mels: usize,
    n_frames: usize,
    pub hop_ms: f64,
}

impl FeatureSequence {
    pub fn new(n_mels: usize, hop_ms: f64) -> Self {
        FeatureSequence {
            data: Vec::new(),
            n_mels,
            n_frames: 0,
            hop_ms,
        }
    }

    pub fn from_frames(frames: Vec<Vec<f64>>, hop_ms: f64) -> Result<Self> {
        let n_mels = frames.first().map(|f| f.len()).unwrap_or(0);
        let mut fs = FeatureSequence::new(n_mels, hop_ms);
        for f in &frames {
            fs.push_frame(f)?;
        }
        Ok(fs)
    }

    pub fn push_frame(&mut self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.n_mels {
            return Err(Error::shape(
                "push_frame",
                format!("{}", self.n_mels),
                format!("{}", frame.len()),
            ));
        }
        self.data.extend_from_slice(frame);
        self.n_frames += 1;
        Ok(())
    }

    /// Number of mel bands `D`.
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// Number of frames `T`.
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Raw frame-major storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Time-reversed copy.
    pub fn reversed(&self) -> FeatureSequence {
        let mut out = FeatureSequence::new(self.n_mels, self.hop_ms);
        for t in (0..self.n_frames).rev() {
            out.push_frame(self.frame(t)).unwrap();
        }
        out
    }

    /// Copy of frames `lo..=hi`.
    pub fn slice_frames(&self, lo: usize, hi: usize) -> FeatureSequence {
        assert!(lo <= hi && hi < self.n_frames);
        let mut out = FeatureSequence::new(self.n_mels, self.hop_ms);
        for t in lo..=hi {
            out.push_frame(self.frame(t)).unwrap();
        }
        out
    }
}

fn samples_for_ms(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Cut a waveform into Hann-windowed frames.
///
/// Frame count is `1 + floor((len - frame_len) / hop)`; a waveform shorter
/// than one frame is an error.
pub fn frame_signal(wave: &Waveform, frame_len_ms: f64, hop_ms: f64) -> Result<Vec<Vec<f64>>> {
    if wave.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if !(hop_ms > 0.0) || frame_len_ms < hop_ms {
        return Err(Error::InvalidArg(format!(
            "need frame_len_ms >= hop_ms > 0, got frame {frame_len_ms} hop {hop_ms}"
        )));
    }
    let frame_len = samples_for_ms(frame_len_ms, wave.sample_rate);
    let hop = samples_for_ms(hop_ms, wave.sample_rate);
    if frame_len == 0 || hop == 0 {
        return Err(Error::InvalidArg(format!(
            "frame/hop round to zero samples at {} Hz",
            wave.sample_rate
        )));
    }
    if wave.len() < frame_len {
        return Err(Error::WaveformTooShort {
            samples: wave.len(),
            frame_samples: frame_len,
        });
    }
    let n_frames = 1 + (wave.len() - frame_len) / hop;
    let window = hann_window(frame_len);
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t * hop;
        let frame = wave.samples[start..start + frame_len]
            .iter()
            .zip(&window)
            .map(|(&s, &w)| s as f64 * w)
            .collect();
        frames.push(frame);
    }
    Ok(frames)
}

/// Frequency in Hz to mel (HTK formula).
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Mel to frequency in Hz.
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters spanning
/// 0 Hz to Nyquist.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|m| mel_to_hz(mel_max * m as f64 / (n_mels + 1) as f64))
        .collect()
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Pool windowed frames into log mel-filterbank energies.
///
/// Each frame is zero-padded to the next power of two, the one-sided power
/// spectrum is computed, and triangular mel filters pool it into `n_mels`
/// bands, natural-log compressed with floor [`LOG_FLOOR`].
pub fn mel_filterbank(
    frames: &[Vec<f64>],
    sample_rate: u32,
    n_mels: usize,
    hop_ms: f64,
) -> Result<FeatureSequence> {
    if frames.is_empty() {
        return Err(Error::EmptySequence("frame list"));
    }
    if n_mels == 0 {
        return Err(Error::InvalidArg("n_mels must be >= 1".into()));
    }
    let frame_len = frames[0].len();
    let n_fft = next_pow2(frame_len);
    let n_bins = n_fft / 2 + 1;
    if n_mels + 2 > n_bins {
        return Err(Error::InvalidArg(format!(
            "n_mels {n_mels} too large for {n_bins} usable DFT bins"
        )));
    }

    // triangular filter edges: n_mels + 2 points equally spaced in mel
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|m| mel_to_hz(mel_max * m as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    // weights[m] holds (bin, weight) pairs for filter m
    let mut weights: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_mels];
    for (m, w) in weights.iter_mut().enumerate() {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let v = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if v > 0.0 {
                w.push((k, v));
            }
        }
    }

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = FeatureSequence::new(n_mels, hop_ms);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut mel_frame = vec![0.0f64; n_mels];
    for frame in frames {
        if frame.len() != frame_len {
            return Err(Error::shape(
                "mel_filterbank frame length",
                format!("{frame_len}"),
                format!("{}", frame.len()),
            ));
        }
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0);
        }
        fft.process(&mut buf);
        for (m, w) in weights.iter().enumerate() {
            let energy: f64 = w.iter().map(|&(k, v)| v * buf[k].norm_sqr()).sum();
            mel_frame[m] = energy.max(LOG_FLOOR).ln();
        }
        out.push_frame(&mel_frame)?;
    }
    Ok(out)
}

/// Full extraction pipeline with the default 25 ms / 10 ms / 80-band setup.
pub fn extract_features(wave: &Waveform) -> Result<FeatureSequence> {
    let frames = frame_signal(wave, FRAME_MS, HOP_MS)?;
    mel_filterbank(&frames, wave.sample_rate, N_MELS, HOP_MS)
}

const FEAT_MAGIC: &[u8; 4] = b"DWFT";
const FEAT_VERSION: u32 = 1;

/// Write a feature file: magic "DWFT", version, D, T, hop_ms, then `D*T`
/// f32 values in frame-major order.
pub fn write_features(fs: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + fs.data.len() * 4);
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(fs.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&(fs.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(fs.hop_ms as f32).to_le_bytes());
    for &v in &fs.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a feature file written by [`write_features`].
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 || &bytes[0..4] != FEAT_MAGIC {
        return Err(Error::FileFormat("not a feature file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEAT_VERSION {
        return Err(Error::FileFormat(format!(
            "unsupported feature file version {version}"
        )));
    }
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let hop_ms = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
    let expect = 20 + d * t * 4;
    if bytes.len() != expect {
        return Err(Error::FileFormat(format!(
            "feature file holds {} bytes, header implies {}",
            bytes.len(),
            expect
        )));
    }
    let data: Vec<f64> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(FeatureSequence {
        data,
        n_mels: d,
        n_frames: t,
        hop_ms,
    })
}
