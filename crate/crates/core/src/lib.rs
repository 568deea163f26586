//! Adaptive speech duration modification.
//!
//! A masked-attention convolutional encoder-decoder predicts, from a source
//! utterance alone, the length of a target rendition and an attention map
//! linking source and target frames. Constrained DTW backtracking over the
//! attention map yields a warping path, which is then used as a lookup table
//! to time-warp features and audio.
//!
//! The crate is organized along the pipeline:
//!
//! - [`wav`] / [`features`]: PCM16 audio I/O and log mel-filterbank extraction
//! - [`mask`]: Itakura-parallelogram attention masks
//! - [`align`]: constrained DTW backtracking, move coding, alignment metrics
//! - [`grad`]: a minimal dense-tensor library with reverse-mode autodiff
//! - [`model`]: the convolutional encoder-decoder and length head
//! - [`train`]: loss, Adam, attention scheduling, synthetic corpus generation
//! - [`infer`]: open-loop duration modification
//! - [`synth`]: feature and waveform warping along an alignment

pub mod align;
pub mod config;
pub mod features;
pub mod grad;
pub mod infer;
pub mod mask;
pub mod model;
pub mod pgm;
pub mod synth;
pub mod train;
pub mod wav;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("empty waveform")]
    EmptyWaveform,

    #[error("waveform too short: {samples} samples, need at least one {frame_samples}-sample frame")]
    WaveformTooShort { samples: usize, frame_samples: usize },

    #[error("unsupported wav file: {0}")]
    WavFormat(String),

    #[error("malformed file: {0}")]
    FileFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: String,
        left: String,
        right: String,
    },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no feasible path: nothing reaches the end of column {column}")]
    NoFeasiblePath { column: usize },

    #[error("empty {0}")]
    EmptySequence(&'static str),

    #[error("masked softmax over an all-blocked support")]
    AllMasked,

    #[error("probability vector is not normalized: sums to {sum}")]
    NotNormalized { sum: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left: left.into(),
            right: right.into(),
        }
    }
}
