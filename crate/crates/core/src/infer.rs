//! Open-loop duration modification: predict the target length and the
//! alignment from the source utterance alone.

use rand::Rng;

use crate::align::{backtrack, ScoreMatrix, WarpPath};
use crate::features::FeatureSequence;
use crate::grad::{Tape, Tensor};
use crate::mask::build_mask;
use crate::model::{features_to_tensor, AttentionMode, Model};
use crate::pgm::write_pgm;
use crate::{Error, Result};

/// Everything one inference pass produces.
pub struct InferenceResult {
    /// Predicted target frame count.
    pub t_hat: usize,
    /// Predicted target/source length ratio, before rounding.
    pub rho_hat: f64,
    /// Soft attention map, source frames by target frames.
    pub attention: ScoreMatrix,
    /// Backtracked alignment through the attention map.
    pub path: WarpPath,
    /// Decoded feature frames (diagnostic; synthesis uses the path).
    pub y_hat: FeatureSequence,
}

/// Run the model open loop on a source utterance: predict the length,
/// decode autoregressively under the mask, and backtrack the attention
/// map into an alignment. Only the source enters; the decoder feeds back
/// its own predictions.
pub fn modify_duration<R: Rng>(
    x_feats: &FeatureSequence,
    model: &Model,
    rng: &mut R,
) -> Result<InferenceResult> {
    let d = model.config.d_in;
    if x_feats.n_mels() != d {
        return Err(Error::shape(
            "modify_duration",
            format!("{d} mel bands"),
            format!("{} mel bands", x_feats.n_mels()),
        ));
    }
    let t_src = x_feats.n_frames();
    if t_src == 0 {
        return Err(Error::EmptySequence("source features"));
    }
    let x = features_to_tensor(x_feats);

    let (z, rho_hat) = {
        let mut tape = Tape::new();
        let pv = model.param_vars(&mut tape);
        let xv = tape.leaf(x.clone());
        let z = model.encode(&mut tape, &pv, xv)?;
        let rho = model.predict_length_ratio(&mut tape, &pv, z)?;
        let rho_hat = tape.value(rho).item();
        (tape.value(z).clone(), rho_hat)
    };
    if !rho_hat.is_finite() {
        return Err(Error::NonFinite("predicted length ratio".into()));
    }
    let t_hat = model.predicted_length(rho_hat, t_src);
    let mask = build_mask(t_src, t_hat, model.config.slope)?;

    let mut attention = ScoreMatrix::zeros(t_src, t_hat)?;
    let mut frames: Vec<Vec<f64>> = Vec::with_capacity(t_hat);
    for j in 0..t_hat {
        let mut y_prev = Tensor::zeros(vec![d, j]);
        for (c, frame) in frames.iter().enumerate() {
            for (r, &v) in frame.iter().enumerate() {
                y_prev.set2(r, c, v);
            }
        }
        let (attn, frame) =
            model.decode_step(&x, &z, &y_prev, &mask, j, AttentionMode::Soft, rng)?;
        for (i, &p) in attn.iter().enumerate() {
            attention.set(i, j, p);
        }
        frames.push(frame);
    }

    let path = backtrack(&log_scores(&attention)?, &mask, model.config.max_consec)?;
    let y_hat = FeatureSequence::from_frames(frames, x_feats.hop_ms)?;
    Ok(InferenceResult {
        t_hat,
        rho_hat,
        attention,
        path,
        y_hat,
    })
}

/// Log-domain view of an attention map for path finding. Summing raw
/// probabilities would reward visiting as many cells as possible — a
/// maximal zigzag beats the diagonal on any non-negative matrix — while
/// summing logs scores a path by the joint likelihood of its cells, so
/// extra low-probability visits cost instead of pay. The floor keeps
/// underflowed cells finite and equally bad.
pub fn log_scores(attention: &ScoreMatrix) -> Result<ScoreMatrix> {
    ScoreMatrix::from_fn(attention.t_src(), attention.t_tgt(), |i, j| {
        attention.get(i, j).max(1e-12).ln()
    })
}

/// Write the attention map as a grayscale image, rows being source frames,
/// with the backtracked path overlaid at mid-gray.
pub fn write_attention_heatmap(
    out: impl AsRef<std::path::Path>,
    attention: &ScoreMatrix,
    path: &WarpPath,
) -> Result<()> {
    let (t_s, t_t) = (attention.t_src(), attention.t_tgt());
    let mut pixels = vec![0u8; t_s * t_t];
    for i in 0..t_s {
        for j in 0..t_t {
            pixels[i * t_t + j] = (attention.get(i, j).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    for &(i, j) in &path.pairs {
        if i < t_s && j < t_t {
            pixels[i * t_t + j] = 128;
        }
    }
    write_pgm(out, t_t, t_s, &pixels)
}
