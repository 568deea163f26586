//! Render a duration-modified utterance from an alignment.
//!
//! The alignment is a lookup table: each target frame names the source
//! frames it came from. Features are warped by averaging those frames;
//! audio is warped by overlap-adding windowed source segments at the
//! target frame rate, with a small cross-correlation shift per segment to
//! keep the phase continuous.

use crate::align::WarpPath;
use crate::features::{FeatureSequence, FRAME_MS};
use crate::wav::Waveform;
use crate::{Error, Result};

/// Warp features along a path. Output frame `j` is the mean of the source
/// frames aligned to `j`; a single-source column copies the frame exactly.
pub fn warp_features(x: &FeatureSequence, path: &WarpPath) -> Result<FeatureSequence> {
    let last = path
        .pairs
        .last()
        .ok_or(Error::EmptySequence("warp path"))?;
    let t_tgt = last.1 + 1;
    path.validate(x.n_frames(), t_tgt, None, None)?;
    let spans = path.source_spans(t_tgt);
    let mut out = FeatureSequence::new(x.n_mels(), x.hop_ms);
    let mut frame = vec![0.0; x.n_mels()];
    for (lo, hi) in spans {
        frame.fill(0.0);
        for i in lo..=hi {
            for (slot, &v) in frame.iter_mut().zip(x.frame(i)) {
                *slot += v;
            }
        }
        let n = (hi - lo + 1) as f64;
        for slot in frame.iter_mut() {
            *slot /= n;
        }
        out.push_frame(&frame)?;
    }
    Ok(out)
}

const MICRO_SHIFT_MS: f64 = 2.0;

/// Warp audio along a path by synchronized overlap-add.
///
/// For each target frame the Hann-windowed source segment of the first
/// aligned source frame is placed at the target hop position, after
/// searching a small shift window for the best cross-correlation with what
/// has already been laid down.
pub fn warp_waveform(wave: &Waveform, path: &WarpPath, hop_ms: f64) -> Result<Waveform> {
    let last = path
        .pairs
        .last()
        .ok_or(Error::EmptySequence("warp path"))?;
    let (t_src, t_tgt) = (last.0 + 1, last.1 + 1);
    path.validate(t_src, t_tgt, None, None)?;
    let sr = wave.sample_rate as f64;
    let frame_len = (FRAME_MS / 1000.0 * sr).round() as usize;
    let hop = (hop_ms / 1000.0 * sr).round() as usize;
    if frame_len == 0 || hop == 0 {
        return Err(Error::InvalidArg(format!(
            "degenerate framing: frame {frame_len}, hop {hop} samples"
        )));
    }
    if wave.len() < frame_len {
        return Err(Error::WaveformTooShort {
            samples: wave.len(),
            frame_samples: frame_len,
        });
    }
    let n_frames = 1 + (wave.len() - frame_len) / hop;
    if n_frames != t_src {
        return Err(Error::shape(
            "warp_waveform",
            format!("{t_src} path source frames"),
            format!("{n_frames} waveform frames"),
        ));
    }

    let window = crate::features::hann_window(frame_len);
    let max_shift = (MICRO_SHIFT_MS / 1000.0 * sr).round() as isize;
    let spans = path.source_spans(t_tgt);
    let out_len = (t_tgt - 1) * hop + frame_len;
    let mut acc = vec![0.0f64; out_len];
    let mut weight = vec![0.0f64; out_len];
    let overlap = frame_len.saturating_sub(hop);

    for (j, &(src_frame, _)) in spans.iter().enumerate() {
        let nominal = (src_frame * hop) as isize;
        let pos = j * hop;
        let mut best_shift = 0isize;
        if j > 0 && overlap > 0 {
            let mut best_score = f64::NEG_INFINITY;
            for mag in 0..=max_shift {
                for &shift in &[-mag, mag] {
                    let start = nominal + shift;
                    if start < 0 || start as usize + frame_len > wave.len() {
                        continue;
                    }
                    let start = start as usize;
                    let mut score = 0.0;
                    for n in 0..overlap {
                        let existing = if weight[pos + n] > 0.0 {
                            acc[pos + n] / weight[pos + n]
                        } else {
                            0.0
                        };
                        score += existing * wave.samples[start + n] as f64;
                    }
                    if score > best_score {
                        best_score = score;
                        best_shift = shift;
                    }
                    if mag == 0 {
                        break;
                    }
                }
            }
        }
        let start = (nominal + best_shift).clamp(0, (wave.len() - frame_len) as isize) as usize;
        for n in 0..frame_len {
            acc[pos + n] += wave.samples[start + n] as f64 * window[n];
            weight[pos + n] += window[n];
        }
    }

    let samples = acc
        .iter()
        .zip(&weight)
        .map(|(&a, &w)| if w > 1e-8 { (a / w) as f32 } else { 0.0 })
        .collect();
    Ok(Waveform::new(samples, wave.sample_rate))
}
