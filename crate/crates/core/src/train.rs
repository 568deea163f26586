//! Training loop and synthetic parallel corpus.
//!
//! The loss is a weighted sum of frame reconstruction error and length
//! ratio error. Attention alternates per pair between the soft
//! distribution and a stochastic one-hot, with the sampling probability
//! stepping up after a warmup. The corpus generator builds smooth random
//! feature fields, warps them along piecewise-linear monotone paths, and
//! stamps each class with a fixed signature so the length head has
//! something to learn from the source alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::align::{backtrack, encode_moves, match_ratio, ScoreMatrix, WarpPath};
use crate::features::FeatureSequence;
use crate::grad::{Tape, Tensor, Var};
use crate::mask::{build_mask, AttentionMask};
use crate::model::{features_to_tensor, AttentionMode, Model, TeacherForced};
use crate::infer::log_scores;
use crate::synth::warp_features;
use crate::{Error, Result};

/// Loss term weights.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight of the frame reconstruction term.
    pub lambda_rec: f64,
    /// Weight of the length ratio term.
    pub lambda_len: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_rec: 1.0,
            lambda_len: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rec > 0.0) || !(self.lambda_len > 0.0) {
            return Err(Error::InvalidArg(format!(
                "loss weights must be positive, got {} and {}",
                self.lambda_rec, self.lambda_len
            )));
        }
        Ok(())
    }
}

/// Optimization schedule and attention-mode scheduling.
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    /// Sampling probability before the warmup ends.
    pub threshold_low: f64,
    /// Sampling probability from the warmup epoch on.
    pub threshold_high: f64,
    pub seed: u64,
    /// Utterances per optimizer step; gradients are averaged.
    pub grad_accum: usize,
    /// Randomly reverse and crop pairs each epoch.
    pub augment: bool,
    /// Use the one-hot mode of the attention instead of the full soft
    /// distribution on the non-sampled branch.
    pub map_soft_branch: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            learning_rate: 1e-4,
            max_epochs: 50,
            warmup_epochs: 10,
            threshold_low: 0.1,
            threshold_high: 0.9,
            seed: 0,
            grad_accum: 1,
            augment: false,
            map_soft_branch: false,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArg(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0 <= self.threshold_low
            && self.threshold_low <= self.threshold_high
            && self.threshold_high <= 1.0)
        {
            return Err(Error::InvalidArg(format!(
                "thresholds must satisfy 0 <= {} <= {} <= 1",
                self.threshold_low, self.threshold_high
            )));
        }
        if self.grad_accum == 0 {
            return Err(Error::InvalidArg("grad_accum must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training pair: a source, the warped-plus-residual target, and the
/// path that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub id: u64,
    pub class: usize,
    pub x: FeatureSequence,
    pub y: FeatureSequence,
    pub true_path: WarpPath,
    /// Target/source frame-count ratio.
    pub true_ratio: f64,
}

/// Combined loss as a plain value.
pub fn loss(y_hat: &Tensor, y: &Tensor, rho_hat: f64, rho: f64, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if y_hat.shape() != y.shape() {
        return Err(Error::shape(
            "loss",
            format!("{:?}", y_hat.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    let n = y.numel().max(1) as f64;
    let mae: f64 = y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    Ok(cfg.lambda_rec * mae + cfg.lambda_len * (rho_hat - rho).abs())
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-tensor first and second moments plus the shared step count.
#[derive(Debug, Default)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if let Some(extra) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::shape(
            "adam_step",
            "model parameters",
            format!("gradient for unknown tensor {extra}"),
        ));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (name, tensor) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| {
            Error::shape("adam_step", name.clone(), "no gradient")
        })?;
        if g.len() != tensor.numel() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: {} values", tensor.numel()),
                format!("{} gradient values", g.len()),
            ));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for ((p, (mi, vi)), &gi) in tensor
            .data_mut()
            .iter_mut()
            .zip(m.iter_mut().zip(v.iter_mut()))
            .zip(g)
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Probability of the sampled attention branch at a given epoch: low
/// during warmup, high afterwards.
pub fn attention_threshold(epoch: usize, schedule: &TrainSchedule) -> f64 {
    if epoch < schedule.warmup_epochs {
        schedule.threshold_low
    } else {
        schedule.threshold_high
    }
}

fn reverse_pair(pair: &SyntheticPair) -> SyntheticPair {
    let t_s = pair.x.n_frames();
    let t_t = pair.y.n_frames();
    let pairs = pair
        .true_path
        .pairs
        .iter()
        .rev()
        .map(|&(i, j)| (t_s - 1 - i, t_t - 1 - j))
        .collect();
    SyntheticPair {
        id: pair.id,
        class: pair.class,
        x: pair.x.reversed(),
        y: pair.y.reversed(),
        true_path: WarpPath { pairs },
        true_ratio: pair.true_ratio,
    }
}

const MIN_CROP_FRAMES: usize = 8;

fn crop_pair<R: Rng>(pair: &SyntheticPair, rng: &mut R) -> Option<SyntheticPair> {
    let t_t = pair.y.n_frames();
    if t_t < MIN_CROP_FRAMES {
        return None;
    }
    let len = rng.gen_range(MIN_CROP_FRAMES..=t_t);
    let j0 = rng.gen_range(0..=t_t - len);
    let j1 = j0 + len - 1;
    let a = pair.true_path.pairs.iter().position(|p| p.1 == j0)?;
    let b = pair.true_path.pairs.iter().rposition(|p| p.1 == j1)?;
    let i_a = pair.true_path.pairs[a].0;
    let i_b = pair.true_path.pairs[b].0;
    let pairs: Vec<(usize, usize)> = pair.true_path.pairs[a..=b]
        .iter()
        .map(|&(i, j)| (i - i_a, j - j0))
        .collect();
    let x = pair.x.slice_frames(i_a, i_b);
    let y = pair.y.slice_frames(j0, j1);
    let true_ratio = y.n_frames() as f64 / x.n_frames() as f64;
    Some(SyntheticPair {
        id: pair.id,
        class: pair.class,
        x,
        y,
        true_path: WarpPath { pairs },
        true_ratio,
    })
}

/// Randomly time-reverse the pair and/or crop a target interval, each with
/// probability one half. A pair too short to crop passes through.
pub fn augment<R: Rng>(pair: &SyntheticPair, rng: &mut R) -> SyntheticPair {
    let mut out = None;
    if rng.gen::<f64>() < 0.5 {
        out = Some(reverse_pair(pair));
    }
    if rng.gen::<f64>() < 0.5 {
        let base = out.as_ref().unwrap_or(pair);
        if let Some(cropped) = crop_pair(base, rng) {
            out = Some(cropped);
        }
    }
    out.unwrap_or_else(|| pair.clone())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn mix(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ 0x9e3779b97f4a7c15);
    for &p in parts {
        h = splitmix64(h ^ p.wrapping_mul(0xbf58476d1ce4e5b9));
    }
    h
}

fn class_vector(n_mels: usize, class: usize, corpus_seed: u64, salt: u64, amp: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(corpus_seed, &[salt, class as u64]));
    (0..n_mels).map(|_| rng.gen_range(-amp..amp)).collect()
}

/// Per-class additive pattern present in every source frame, so the
/// source alone reveals the class.
pub(crate) fn class_signature(n_mels: usize, class: usize, corpus_seed: u64) -> Vec<f64> {
    class_vector(n_mels, class, corpus_seed, 0xC1A5, 0.8)
}

/// Per-class residual added to every target frame on top of the warp.
pub(crate) fn class_residual(n_mels: usize, class: usize, corpus_seed: u64) -> Vec<f64> {
    class_vector(n_mels, class, corpus_seed, 0x4E51, 0.5)
}

fn random_field<R: Rng>(
    n_mels: usize,
    t: usize,
    class: usize,
    corpus_seed: u64,
    rng: &mut R,
) -> FeatureSequence {
    let sig = class_signature(n_mels, class, corpus_seed);
    let n_bumps = rng.gen_range(5..=15);
    let bumps: Vec<(f64, f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            (
                rng.gen_range(-1.5..1.5),
                rng.gen_range(0.0..n_mels as f64),
                rng.gen_range(0.0..t as f64),
                rng.gen_range(1.5..8.0),
                rng.gen_range(1.5..8.0),
            )
        })
        .collect();
    let mut fs = FeatureSequence::new(n_mels, crate::features::HOP_MS);
    let mut frame = vec![0.0; n_mels];
    for tt in 0..t {
        for (m, slot) in frame.iter_mut().enumerate() {
            let mut v = sig[m];
            for &(amp, mu_m, mu_t, sm, st) in &bumps {
                let dm = (m as f64 - mu_m) / sm;
                let dt = (tt as f64 - mu_t) / st;
                v += amp * (-0.5 * (dm * dm + dt * dt)).exp();
            }
            *slot = v + 0.02 * rng.gen_range(-1.0..1.0);
        }
        fs.push_frame(&frame).expect("fixed frame width");
    }
    fs
}

/// Monotone non-decreasing source index per target frame, following a
/// random piecewise-linear warp with local slopes inside `[1/s, s]`.
fn gen_warp<R: Rng>(
    rng: &mut R,
    t_src: usize,
    s: f64,
    rho_star: f64,
) -> Result<(Vec<usize>, usize)> {
    if t_src == 1 {
        return Ok((vec![0], 1));
    }
    let lo_t = ((t_src as f64 / s).ceil() as usize).max(1);
    let hi_t = ((t_src as f64 * s).floor() as usize).max(1);
    let t_tgt = ((rho_star * t_src as f64).round() as usize).clamp(lo_t, hi_t);
    if t_tgt == 1 {
        return Ok((vec![0], 1));
    }
    let span_src = (t_src - 1) as f64;
    let rise = (t_tgt - 1) as f64;
    // segment slopes are drawn multiplicatively around the grid's own
    // diagonal rate; the exact-endpoint rescale can stretch the spread by
    // the same factor again, so a half-exponent of ln(s)/6 keeps every
    // final slope within s^(1/3) of the diagonal and the whole curve
    // strictly inside the mask cones
    let mut segments = None;
    for _ in 0..200 {
        let max_segs = ((span_src / 2.0).floor() as usize).clamp(1, 5);
        let segs = if max_segs < 2 {
            1
        } else {
            rng.gen_range(2..=max_segs)
        };
        let mut bounds = vec![0.0];
        let mut cuts: Vec<f64> = (0..segs - 1)
            .map(|_| rng.gen_range(0.15..0.85) * span_src)
            .collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        bounds.extend(cuts);
        bounds.push(span_src);
        let lens: Vec<f64> = bounds.windows(2).map(|w| w[1] - w[0]).collect();
        if lens.iter().any(|&l| l < 1.0) {
            continue;
        }
        segments = Some((bounds, lens));
        break;
    }
    // cramped spans can keep rejecting cut draws; a single linear segment
    // is always valid
    let (bounds, lens) = segments.unwrap_or_else(|| (vec![0.0, span_src], vec![span_src]));
    let segs = lens.len();
    let m = rise / span_src;
    let half_spread = s.ln() / 6.0;
    let slopes: Vec<f64> = (0..segs)
        .map(|_| {
            if half_spread > 0.0 {
                m * rng.gen_range(-half_spread..=half_spread).exp()
            } else {
                m
            }
        })
        .collect();
    let r0: f64 = slopes.iter().zip(&lens).map(|(b, l)| b * l).sum();
    let f = rise / r0;
    let scaled: Vec<f64> = slopes.iter().map(|b| b * f).collect();
    let mut knot_t = vec![0.0];
    for (b, l) in scaled.iter().zip(&lens) {
        knot_t.push(knot_t.last().unwrap() + b * l);
    }
    *knot_t.last_mut().unwrap() = rise;
    let mut src = Vec::with_capacity(t_tgt);
    let mut seg = 0usize;
    for j in 0..t_tgt {
        let jf = j as f64;
        while seg + 1 < segs && knot_t[seg + 1] < jf {
            seg += 1;
        }
        let sf = bounds[seg] + (jf - knot_t[seg]) / scaled[seg];
        let mut i = sf.round().clamp(0.0, span_src) as usize;
        if let Some(&prev) = src.last() {
            i = i.max(prev);
        }
        src.push(i);
    }
    src[0] = 0;
    *src.last_mut().unwrap() = t_src - 1;
    Ok((src, t_tgt))
}

/// Expand a per-column source index into a full path: vertical runs climb
/// within a column, then a diagonal step enters the next one.
fn path_from_src(src: &[usize], t_src: usize) -> WarpPath {
    let t = src.len();
    let mut pairs = Vec::new();
    for j in 0..t {
        let lo = src[j];
        let hi = if j + 1 < t {
            src[j + 1].max(lo + 1) - 1
        } else {
            t_src - 1
        };
        for i in lo..=hi {
            pairs.push((i, j));
        }
    }
    WarpPath { pairs }
}

fn class_ratio_bases(n_classes: usize, s: f64) -> Vec<f64> {
    let max_ln = s.min(4.0).ln() * 0.7;
    (0..n_classes)
        .map(|c| {
            let u = if n_classes == 1 {
                0.0
            } else {
                2.0 * c as f64 / (n_classes - 1) as f64 - 1.0
            };
            (u * max_ln).exp()
        })
        .collect()
}

/// Synthetic parallel corpus with class ratios spread across the
/// representable band.
pub fn synth_dataset(
    n_pairs: usize,
    n_mels: usize,
    t_src_range: (usize, usize),
    slope_bound: f64,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<SyntheticPair>> {
    if n_classes == 0 {
        return Err(Error::InvalidArg("need at least one class".into()));
    }
    let bases = class_ratio_bases(n_classes, slope_bound);
    synth_dataset_with_bases(n_pairs, n_mels, t_src_range, slope_bound, &bases, seed)
}

/// Synthetic corpus with explicit per-class base length ratios.
pub fn synth_dataset_with_bases(
    n_pairs: usize,
    n_mels: usize,
    t_src_range: (usize, usize),
    slope_bound: f64,
    bases: &[f64],
    seed: u64,
) -> Result<Vec<SyntheticPair>> {
    let (t_lo, t_hi) = t_src_range;
    if n_pairs == 0 || n_mels == 0 || bases.is_empty() {
        return Err(Error::InvalidArg(
            "synthetic corpus needs pairs, mel bands, and classes".into(),
        ));
    }
    if t_lo < 2 || t_lo > t_hi {
        return Err(Error::InvalidArg(format!(
            "bad source length range [{t_lo}, {t_hi}]"
        )));
    }
    if !(slope_bound >= 1.0) {
        return Err(Error::InvalidArg(format!(
            "slope bound must be >= 1, got {slope_bound}"
        )));
    }
    for (c, &b) in bases.iter().enumerate() {
        if !(1.0 / slope_bound..=slope_bound).contains(&b) {
            return Err(Error::InvalidArg(format!(
                "class {c} base ratio {b} outside the slope band"
            )));
        }
    }
    let mut out = Vec::with_capacity(n_pairs);
    for idx in 0..n_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[0x5eed, idx as u64]));
        let class = idx % bases.len();
        let t_src = rng.gen_range(t_lo..=t_hi);
        let x = random_field(n_mels, t_src, class, seed, &mut rng);
        let rho_star = (bases[class] * rng.gen_range(-0.02..0.02f64).exp())
            .clamp(1.0 / slope_bound, slope_bound);
        let (src, t_tgt) = gen_warp(&mut rng, t_src, slope_bound, rho_star)?;
        let true_path = path_from_src(&src, t_src);
        let warped = warp_features(&x, &true_path)?;
        let residual = class_residual(n_mels, class, seed);
        let mut y = FeatureSequence::new(n_mels, x.hop_ms);
        let mut frame = vec![0.0; n_mels];
        for j in 0..warped.n_frames() {
            for ((slot, &w), &r) in frame.iter_mut().zip(warped.frame(j)).zip(&residual) {
                *slot = w + r;
            }
            y.push_frame(&frame)?;
        }
        out.push(SyntheticPair {
            id: idx as u64,
            class,
            x,
            y,
            true_path,
            true_ratio: t_tgt as f64 / t_src as f64,
        });
    }
    Ok(out)
}

/// Per-epoch averages.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub len_err: f64,
    pub match_ratio: f64,
}

/// Render metric rows as CSV.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,len_err,match_ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.loss, r.len_err, r.match_ratio
        ));
    }
    s
}

fn attach_loss(
    tape: &mut Tape,
    fwd: &TeacherForced,
    y: &Tensor,
    true_ratio: f64,
    cfg: &LossConfig,
) -> Result<(Var, f64)> {
    let y_leaf = tape.leaf(y.clone());
    let rec = tape.l1_loss(fwd.y_hat, y_leaf)?;
    let rho_ref = tape.leaf(Tensor::new(vec![1, 1], vec![true_ratio])?);
    let len = tape.l1_loss(fwd.rho, rho_ref)?;
    let rec_w = tape.scale(rec, cfg.lambda_rec);
    let len_w = tape.scale(len, cfg.lambda_len);
    let total = tape.add(rec_w, len_w)?;
    let value = tape.value(total).item();
    Ok((total, value))
}

struct PairOutcome {
    loss: f64,
    len_err: f64,
    match_ratio: f64,
    grads: BTreeMap<String, Vec<f64>>,
}

fn run_pair(
    model: &Model,
    pair: &SyntheticPair,
    loss_cfg: &LossConfig,
    schedule: &TrainSchedule,
    threshold: f64,
    epoch: usize,
) -> Result<PairOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(schedule.seed, &[pair.id, epoch as u64]));
    let augmented;
    let p = if schedule.augment {
        augmented = augment(pair, &mut rng);
        &augmented
    } else {
        pair
    };
    let u: f64 = rng.gen();
    let mode = if u < threshold {
        AttentionMode::Sampled
    } else if schedule.map_soft_branch {
        AttentionMode::Map
    } else {
        AttentionMode::Soft
    };
    let x = features_to_tensor(&p.x);
    let y = features_to_tensor(&p.y);
    let mask = build_mask(p.x.n_frames(), p.y.n_frames(), model.config.slope)?;
    let mut tape = Tape::new();
    let fwd = model.forward_teacher_forced(&mut tape, &x, &y, &mask, mode, &mut rng)?;
    let (total, loss_value) = attach_loss(&mut tape, &fwd, &y, p.true_ratio, loss_cfg)?;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss diverged on pair {} at epoch {epoch}",
            p.id
        )));
    }
    tape.backward(total)?;
    let grads = fwd
        .param_vars
        .iter()
        .map(|(k, &v)| (k.clone(), tape.grad(v).to_vec()))
        .collect();
    let rho_hat = tape.value(fwd.rho).item();
    let attn = fwd.attention(&tape);
    let scores = ScoreMatrix::from_fn(attn.rows(), attn.cols(), |i, j| attn.at2(i, j))?;
    let predicted = backtrack(&log_scores(&scores)?, &mask, model.config.max_consec)?;
    let mr = match_ratio(&encode_moves(&predicted), &encode_moves(&p.true_path))?;
    Ok(PairOutcome {
        loss: loss_value,
        len_err: (rho_hat - p.true_ratio).abs(),
        match_ratio: mr,
        grads,
    })
}

/// Optimize the model in place; one row of averaged metrics per epoch.
pub fn train(
    model: &mut Model,
    dataset: &[SyntheticPair],
    loss_cfg: &LossConfig,
    schedule: &TrainSchedule,
) -> Result<Vec<EpochMetrics>> {
    loss_cfg.validate()?;
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySequence("training dataset"));
    }
    let mut adam = AdamState::new();
    let mut rows = Vec::with_capacity(schedule.max_epochs);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..schedule.max_epochs {
        let threshold = attention_threshold(epoch, schedule);
        let (mut loss_sum, mut len_sum, mut match_sum) = (0.0, 0.0, 0.0);
        for group in indices.chunks(schedule.grad_accum) {
            let outcomes: Vec<PairOutcome> = group
                .par_iter()
                .map(|&idx| run_pair(model, &dataset[idx], loss_cfg, schedule, threshold, epoch))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / outcomes.len() as f64;
            let mut mean_grads: BTreeMap<String, Vec<f64>> = model
                .params
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
                .collect();
            for o in &outcomes {
                loss_sum += o.loss;
                len_sum += o.len_err;
                match_sum += o.match_ratio;
                for (k, g) in &o.grads {
                    let acc = mean_grads.get_mut(k).ok_or_else(|| {
                        Error::shape("train", "model parameters", format!("gradient {k}"))
                    })?;
                    for (a, &gv) in acc.iter_mut().zip(g) {
                        *a += gv * scale;
                    }
                }
            }
            adam_step(&mut model.params, &mean_grads, &mut adam, schedule.learning_rate)?;
        }
        let n = dataset.len() as f64;
        rows.push(EpochMetrics {
            epoch,
            loss: loss_sum / n,
            len_err: len_sum / n,
            match_ratio: match_sum / n,
        });
    }
    Ok(rows)
}

/// Soft-mode loss of one pair as a plain value, for gradient checking.
pub fn soft_loss_value(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    mask: &AttentionMask,
    true_ratio: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward_teacher_forced(&mut tape, x, y, mask, AttentionMode::Soft, &mut rng)?;
    let (_, value) = attach_loss(&mut tape, &fwd, y, true_ratio, cfg)?;
    Ok(value)
}

/// Soft-mode loss and analytic parameter gradients of one pair.
pub fn soft_loss_grads(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    mask: &AttentionMask,
    true_ratio: f64,
    cfg: &LossConfig,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward_teacher_forced(&mut tape, x, y, mask, AttentionMode::Soft, &mut rng)?;
    let (total, value) = attach_loss(&mut tape, &fwd, y, true_ratio, cfg)?;
    tape.backward(total)?;
    let grads = fwd
        .param_vars
        .iter()
        .map(|(k, &v)| (k.clone(), tape.grad(v).to_vec()))
        .collect();
    Ok((value, grads))
}
