//! Convolutional encoder-decoder with a length head and masked attention.
//!
//! The encoder turns a source feature sequence into embeddings; a pooled
//! linear head predicts the target/source length ratio; the decoder runs
//! causal convolutions over the previous target frames and, per step,
//! attends over the source under a binary mask. Each predicted frame is the
//! attention-weighted combination of *raw* source frames plus a projection
//! of the decoder state, so with an untrained decoder the model already
//! copies source frames through the attention.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::FeatureSequence;
use crate::grad::{PadMode, Tape, Tensor, Var};
use crate::mask::AttentionMask;
use crate::{Error, Result};

/// Structural hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub kernel: usize,
    pub slope: f64,
    pub max_consec: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 80,
            d_model: 256,
            n_enc_blocks: 10,
            n_dec_blocks: 10,
            kernel: 3,
            slope: crate::mask::DEFAULT_SLOPE,
            max_consec: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0
            || self.d_model == 0
            || self.n_enc_blocks == 0
            || self.n_dec_blocks == 0
            || self.kernel == 0
            || self.max_consec == 0
        {
            return Err(Error::InvalidArg("model config counts must be >= 1".into()));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::InvalidArg(format!(
                "d_model must be even for the gated units, got {}",
                self.d_model
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArg(format!(
                "kernel must be odd for same-padded encoder convolutions, got {}",
                self.kernel
            )));
        }
        if !(self.slope >= 1.0) {
            return Err(Error::InvalidArg(format!("slope must be >= 1, got {}", self.slope)));
        }
        Ok(())
    }
}

/// How the attention context weights the source frames: the soft
/// distribution, a one-hot draw from it, or a one-hot at its mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Soft,
    Sampled,
    Map,
}

/// Model parameters keyed by stable names, plus the structure they realize.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (d, dm, k) = (cfg.d_in, cfg.d_model, cfg.kernel);
    let mut m = BTreeMap::new();
    m.insert("enc.in_proj.w".to_string(), vec![dm, d]);
    m.insert("enc.in_proj.b".to_string(), vec![dm]);
    for i in 0..cfg.n_enc_blocks {
        m.insert(format!("enc.block{i}.conv.w"), vec![2 * dm, dm, k]);
        m.insert(format!("enc.block{i}.conv.b"), vec![2 * dm]);
    }
    m.insert("len_head.w".to_string(), vec![1, dm]);
    m.insert("len_head.b".to_string(), vec![1]);
    m.insert("dec.in_proj.w".to_string(), vec![dm, d]);
    m.insert("dec.in_proj.b".to_string(), vec![dm]);
    for i in 0..cfg.n_dec_blocks {
        m.insert(format!("dec.block{i}.conv.w"), vec![2 * dm, dm, k]);
        m.insert(format!("dec.block{i}.conv.b"), vec![2 * dm]);
    }
    m.insert("dec.out_proj.w".to_string(), vec![d, dm]);
    m.insert("dec.out_proj.b".to_string(), vec![d]);
    m
}

impl Model {
    /// Fresh model: uniform Glorot weights, zero biases, each tensor drawn
    /// from its own stream so adding a block never reshuffles the others.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in expected_shapes(&config) {
            let numel: usize = shape.iter().product();
            let tensor = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let (fan_in, fan_out) = match shape.len() {
                    2 => (shape[1], shape[0]),
                    _ => (shape[1] * shape[2], shape[0] * shape[2]),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(&name)));
                let data = (0..numel).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, tensor);
        }
        Ok(Model { config, params })
    }

    /// Rebuild a model around a loaded parameter table, inferring the
    /// structure from tensor names and shapes. The mask settings are not
    /// stored with the weights and must be supplied.
    pub fn from_params(
        params: BTreeMap<String, Tensor>,
        slope: f64,
        max_consec: usize,
    ) -> Result<Model> {
        let in_proj = params
            .get("enc.in_proj.w")
            .ok_or_else(|| Error::FileFormat("checkpoint lacks enc.in_proj.w".into()))?;
        if in_proj.rank() != 2 {
            return Err(Error::FileFormat("enc.in_proj.w is not a matrix".into()));
        }
        let (d_model, d_in) = (in_proj.rows(), in_proj.cols());
        let count_blocks = |prefix: &str| {
            params
                .keys()
                .filter(|k| k.starts_with(prefix) && k.ends_with(".conv.w"))
                .count()
        };
        let n_enc_blocks = count_blocks("enc.block");
        let n_dec_blocks = count_blocks("dec.block");
        let kernel = params
            .get("enc.block0.conv.w")
            .filter(|t| t.rank() == 3)
            .map(|t| t.shape()[2])
            .ok_or_else(|| Error::FileFormat("checkpoint lacks enc.block0.conv.w".into()))?;
        let config = ModelConfig {
            d_in,
            d_model,
            n_enc_blocks,
            n_dec_blocks,
            kernel,
            slope,
            max_consec,
        };
        config.validate()?;
        let expected = expected_shapes(&config);
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::FileFormat(format!(
                        "checkpoint tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::FileFormat(format!("checkpoint lacks {name}"))),
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::FileFormat(format!("checkpoint has unknown tensor {extra}")));
        }
        Ok(Model { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.params)
    }

    pub fn load(path: impl AsRef<Path>, slope: f64, max_consec: usize) -> Result<Model> {
        Model::from_params(read_checkpoint(path)?, slope, max_consec)
    }

    /// Put every parameter on the tape, keyed by name.
    pub fn param_vars(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
            .collect()
    }

    fn blocks(
        &self,
        tape: &mut Tape,
        pv: &BTreeMap<String, Var>,
        prefix: &str,
        n_blocks: usize,
        mode: PadMode,
        mut h: Var,
    ) -> Result<Var> {
        let mut outputs = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let w = pv[&format!("{prefix}.block{i}.conv.w")];
            let b = pv[&format!("{prefix}.block{i}.conv.b")];
            let conv = tape.conv1d(h, w, b, mode)?;
            let gated = tape.glu(conv)?;
            let sum = tape.add(h, gated)?;
            h = tape.scale(sum, 0.5f64.sqrt());
            outputs.push(h);
        }
        // the decoder taps the running sum of block outputs; the encoder
        // only needs the last state
        if prefix == "dec" {
            let mut skip = outputs[0];
            for &o in &outputs[1..] {
                skip = tape.add(skip, o)?;
            }
            Ok(skip)
        } else {
            Ok(h)
        }
    }

    /// Source embeddings `z: d_model x T_s`.
    pub fn encode(&self, tape: &mut Tape, pv: &BTreeMap<String, Var>, x: Var) -> Result<Var> {
        if tape.value(x).rank() != 2 || tape.value(x).rows() != self.config.d_in {
            return Err(Error::shape(
                "encode",
                format!("[{}, T]", self.config.d_in),
                format!("{:?}", tape.value(x).shape()),
            ));
        }
        let w = pv["enc.in_proj.w"];
        let b = pv["enc.in_proj.b"];
        let h = tape.linear(x, w, b)?;
        self.blocks(tape, pv, "enc", self.config.n_enc_blocks, PadMode::Same, h)
    }

    /// Predicted target/source length ratio, strictly positive via the
    /// exponential link. Returns a `1 x 1` node.
    pub fn predict_length_ratio(
        &self,
        tape: &mut Tape,
        pv: &BTreeMap<String, Var>,
        z: Var,
    ) -> Result<Var> {
        let pooled = tape.mean_pool_time(z)?;
        let lin = tape.linear(pooled, pv["len_head.w"], pv["len_head.b"])?;
        Ok(tape.exp(lin))
    }

    /// Length in frames implied by a predicted ratio: rounded, clamped into
    /// the band the mask slope can align, and at least 1.
    pub fn predicted_length(&self, rho: f64, t_src: usize) -> usize {
        let lo = (t_src as f64 / self.config.slope).ceil();
        let hi = (t_src as f64 * self.config.slope).floor();
        let raw = (rho * t_src as f64).round();
        (raw.clamp(lo, hi) as usize).max(1)
    }

    /// Decoder states for all positions in one causal pass.
    ///
    /// `y_in` is the shifted target sequence: a zero start frame followed
    /// by the previous target frames, `D x T`.
    fn decoder_states(
        &self,
        tape: &mut Tape,
        pv: &BTreeMap<String, Var>,
        y_in: Var,
    ) -> Result<Var> {
        let h = tape.linear(y_in, pv["dec.in_proj.w"], pv["dec.in_proj.b"])?;
        self.blocks(tape, pv, "dec", self.config.n_dec_blocks, PadMode::Causal, h)
    }

    /// One autoregressive step: attention over the source for target
    /// position `j`, and the predicted frame. `y_prev` holds the `t`
    /// previous target frames (`D x t`); plain values are returned.
    pub fn decode_step<R: Rng>(
        &self,
        x: &Tensor,
        z: &Tensor,
        y_prev: &Tensor,
        mask: &AttentionMask,
        j: usize,
        mode: AttentionMode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.config.d_in;
        if y_prev.rank() != 2 || y_prev.rows() != d {
            return Err(Error::shape(
                "decode_step",
                format!("[{d}, t]"),
                format!("{:?}", y_prev.shape()),
            ));
        }
        let t = y_prev.cols();
        let mut y_in = Tensor::zeros(vec![d, t + 1]);
        for r in 0..d {
            for c in 0..t {
                y_in.set2(r, c + 1, y_prev.at2(r, c));
            }
        }
        let mut tape = Tape::new();
        let pv = self.param_vars(&mut tape);
        let xv = tape.leaf(x.clone());
        let zv = tape.leaf(z.clone());
        let y_in = tape.leaf(y_in);
        let states = self.decoder_states(&mut tape, &pv, y_in)?;
        let step = self.attend_and_predict(&mut tape, &pv, xv, zv, states, t, mask, j, mode, rng)?;
        let attn = tape.value(step.soft_attention).data().to_vec();
        let frame = tape.value(step.frame).data().to_vec();
        Ok((attn, frame))
    }

    #[allow(clippy::too_many_arguments)]
    fn attend_and_predict<R: Rng>(
        &self,
        tape: &mut Tape,
        pv: &BTreeMap<String, Var>,
        x: Var,
        z: Var,
        states: Var,
        t: usize,
        mask: &AttentionMask,
        j: usize,
        mode: AttentionMode,
        rng: &mut R,
    ) -> Result<StepVars> {
        let t_src = tape.value(z).cols();
        let (lo, hi) = mask.column_support(j)?;
        let mut allowed = vec![false; t_src];
        for slot in allowed.iter_mut().take(hi + 1).skip(lo) {
            *slot = true;
        }
        let d_t = tape.col(states, t)?;
        let zt = tape.transpose(z)?;
        let scores = tape.matmul(zt, d_t)?;
        let scaled = tape.scale(scores, 1.0 / (self.config.d_model as f64).sqrt());
        let soft = tape.masked_softmax(scaled, &allowed)?;
        let weights = match mode {
            AttentionMode::Soft => soft,
            AttentionMode::Sampled => tape.sample_one_hot(soft, rng)?,
            AttentionMode::Map => tape.hard_one_hot(soft)?,
        };
        let context = tape.matmul(x, weights)?;
        let out = tape.linear(d_t, pv["dec.out_proj.w"], pv["dec.out_proj.b"])?;
        let frame = tape.add(context, out)?;
        Ok(StepVars {
            soft_attention: soft,
            frame,
        })
    }
}

struct StepVars {
    soft_attention: Var,
    frame: Var,
}

/// Everything the training loop needs from one teacher-forced pass.
pub struct TeacherForced {
    /// Predicted frames, `D x T`.
    pub y_hat: Var,
    /// Predicted length ratio, `1 x 1`.
    pub rho: Var,
    /// Soft attention columns, each `T_s x 1`.
    pub attn_cols: Vec<Var>,
    /// Parameter nodes by name, for reading gradients after backward.
    pub param_vars: BTreeMap<String, Var>,
}

impl TeacherForced {
    /// Assembled soft attention map, `T_s x T`.
    pub fn attention(&self, tape: &Tape) -> Tensor {
        let t_src = tape.value(self.attn_cols[0]).rows();
        let t_tgt = self.attn_cols.len();
        let mut a = Tensor::zeros(vec![t_src, t_tgt]);
        for (j, &col) in self.attn_cols.iter().enumerate() {
            for i in 0..t_src {
                a.set2(i, j, tape.value(col).data()[i]);
            }
        }
        a
    }
}

impl Model {
    /// Full pass with ground-truth history: every decoder position computed
    /// in one causal pass, then attention and a predicted frame per target
    /// step. The mask must span `T_s x T`.
    pub fn forward_teacher_forced<R: Rng>(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        y: &Tensor,
        mask: &AttentionMask,
        mode: AttentionMode,
        rng: &mut R,
    ) -> Result<TeacherForced> {
        let d = self.config.d_in;
        if x.rank() != 2 || x.rows() != d || y.rank() != 2 || y.rows() != d {
            return Err(Error::shape(
                "forward_teacher_forced",
                format!("[{d}, T]"),
                format!("x {:?}, y {:?}", x.shape(), y.shape()),
            ));
        }
        let (t_src, t_tgt) = (x.cols(), y.cols());
        if (mask.t_src(), mask.t_tgt()) != (t_src, t_tgt) {
            return Err(Error::shape(
                "forward_teacher_forced",
                format!("mask {}x{}", mask.t_src(), mask.t_tgt()),
                format!("pair {t_src}x{t_tgt}"),
            ));
        }
        let pv = self.param_vars(tape);
        let xv = tape.leaf(x.clone());
        let z = self.encode(tape, &pv, xv)?;
        let rho = self.predict_length_ratio(tape, &pv, z)?;

        // shift the truth right by one zero start frame
        let mut y_in = Tensor::zeros(vec![d, t_tgt]);
        for r in 0..d {
            for c in 0..t_tgt - 1 {
                y_in.set2(r, c + 1, y.at2(r, c));
            }
        }
        let y_in = tape.leaf(y_in);
        let states = self.decoder_states(tape, &pv, y_in)?;

        let mut frames = Vec::with_capacity(t_tgt);
        let mut attn_cols = Vec::with_capacity(t_tgt);
        for t in 0..t_tgt {
            let step =
                self.attend_and_predict(tape, &pv, xv, z, states, t, mask, t, mode, rng)?;
            frames.push(step.frame);
            attn_cols.push(step.soft_attention);
        }
        let y_hat = tape.concat_time(&frames)?;
        Ok(TeacherForced {
            y_hat,
            rho,
            attn_cols,
            param_vars: pv,
        })
    }
}

/// Convert features to a `D x T` tensor.
pub fn features_to_tensor(fs: &FeatureSequence) -> Tensor {
    let (d, t) = (fs.n_mels(), fs.n_frames());
    let mut out = Tensor::zeros(vec![d, t]);
    for j in 0..t {
        for (i, &v) in fs.frame(j).iter().enumerate() {
            out.set2(i, j, v);
        }
    }
    out
}

/// Convert a `D x T` tensor back to features.
pub fn tensor_to_features(t: &Tensor, hop_ms: f64) -> Result<FeatureSequence> {
    if t.rank() != 2 {
        return Err(Error::shape("tensor_to_features", "rank-2", format!("{:?}", t.shape())));
    }
    let mut fs = FeatureSequence::new(t.rows(), hop_ms);
    let mut frame = vec![0.0; t.rows()];
    for j in 0..t.cols() {
        for (i, slot) in frame.iter_mut().enumerate() {
            *slot = t.at2(i, j);
        }
        fs.push_frame(&frame)?;
    }
    Ok(fs)
}

fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFFFFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB88320 & mask);
        }
    }
    !crc
}

const CKPT_MAGIC: &[u8; 4] = b"DBDM";
const CKPT_VERSION: u32 = 1;

/// Serialize a parameter table: magic, version, tensor count, then each
/// tensor as name, rank, dims, and f32 data, with a trailing CRC32.
pub fn write_checkpoint(path: impl AsRef<Path>, params: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidArg(format!("tensor name too long: {name}")));
        }
        if tensor.rank() > u8::MAX as usize {
            return Err(Error::InvalidArg(format!("tensor rank too large: {name}")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::FileFormat(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Read a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != CKPT_MAGIC {
        return Err(Error::FileFormat("not a checkpoint (bad magic)".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::FileFormat(format!(
            "checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::FileFormat(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::FileFormat("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::FileFormat(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::FileFormat(format!(
            "{} trailing bytes after the last tensor",
            body.len() - r.pos
        )));
    }
    Ok(params)
}
