//! Constrained backtracking over similarity matrices and alignment metrics.
//!
//! The central routine finds the monotone warping path from `(0, 0)` to
//! `(T_s-1, T_t-1)` maximizing the summed similarity of visited cells,
//! subject to a binary mask and a cap on consecutive horizontal or vertical
//! steps. It runs equally over an attention map (open loop) or a pairwise
//! frame-distance matrix (closed loop, [`dtw_align`]); comparing the two
//! paths is what [`match_ratio`] measures.

use std::fmt;
use std::path::Path;

use crate::features::FeatureSequence;
use crate::mask::AttentionMask;
use crate::{Error, Result};

/// A `T_s x T_t` similarity matrix; larger values mean a better match.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    t_src: usize,
    t_tgt: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn zeros(t_src: usize, t_tgt: usize) -> Result<Self> {
        if t_src == 0 || t_tgt == 0 {
            return Err(Error::InvalidArg(format!(
                "score matrix needs non-zero dimensions, got {t_src}x{t_tgt}"
            )));
        }
        Ok(ScoreMatrix {
            t_src,
            t_tgt,
            data: vec![0.0; t_src * t_tgt],
        })
    }

    pub fn from_fn(
        t_src: usize,
        t_tgt: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut m = ScoreMatrix::zeros(t_src, t_tgt)?;
        for i in 0..t_src {
            for j in 0..t_tgt {
                m.data[i * t_tgt + j] = f(i, j);
            }
        }
        Ok(m)
    }

    pub fn t_src(&self) -> usize {
        self.t_src
    }

    pub fn t_tgt(&self) -> usize {
        self.t_tgt
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.t_tgt + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.t_tgt + j] = v;
    }
}

/// One warping-path step: target advances, both advance, or source advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    H,
    D,
    V,
}

impl fmt::Display for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Move::H => "H",
            Move::D => "D",
            Move::V => "V",
        })
    }
}

/// The step classes of a warping path, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoveSequence {
    pub moves: Vec<Move>,
}

impl MoveSequence {
    pub fn len(&self) -> usize {
        self.moves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }
}

impl fmt::Display for MoveSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.moves {
            write!(f, "{m}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for MoveSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let moves = s
            .chars()
            .map(|c| match c {
                'H' => Ok(Move::H),
                'D' => Ok(Move::D),
                'V' => Ok(Move::V),
                other => Err(Error::InvalidArg(format!("unknown move '{other}'"))),
            })
            .collect::<Result<_>>()?;
        Ok(MoveSequence { moves })
    }
}

/// A monotone alignment path of (source, target) index pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpPath {
    pub pairs: Vec<(usize, usize)>,
}

impl WarpPath {
    /// Check anchoring, unit steps, and optionally mask membership and the
    /// consecutive-step cap.
    pub fn validate(
        &self,
        t_src: usize,
        t_tgt: usize,
        mask: Option<&AttentionMask>,
        max_consec: Option<usize>,
    ) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::EmptySequence("warp path"));
        }
        if self.pairs[0] != (0, 0) {
            return Err(Error::InvalidArg(format!(
                "path starts at {:?}, not (0, 0)",
                self.pairs[0]
            )));
        }
        let last = *self.pairs.last().unwrap();
        if last != (t_src - 1, t_tgt - 1) {
            return Err(Error::InvalidArg(format!(
                "path ends at {last:?}, not ({}, {})",
                t_src - 1,
                t_tgt - 1
            )));
        }
        let mut run = 0usize;
        let mut run_kind = None;
        for w in self.pairs.windows(2) {
            let (di, dj) = (
                w[1].0 as i64 - w[0].0 as i64,
                w[1].1 as i64 - w[0].1 as i64,
            );
            let kind = match (di, dj) {
                (1, 1) => None,
                (0, 1) => Some(Move::H),
                (1, 0) => Some(Move::V),
                _ => {
                    return Err(Error::InvalidArg(format!(
                        "non-unit step {:?} -> {:?}",
                        w[0], w[1]
                    )))
                }
            };
            if kind.is_some() && kind == run_kind {
                run += 1;
            } else {
                run = 1;
                run_kind = kind;
            }
            if let (Some(k), Some(cap)) = (kind, max_consec) {
                if run > cap {
                    return Err(Error::InvalidArg(format!(
                        "{k} run of {run} exceeds cap {cap}"
                    )));
                }
            }
        }
        if let Some(mask) = mask {
            for &(i, j) in &self.pairs {
                if !mask.allowed(i, j) {
                    return Err(Error::InvalidArg(format!("path visits masked cell ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// Inclusive source-index span aligned to each target column.
    pub fn source_spans(&self, t_tgt: usize) -> Vec<(usize, usize)> {
        let mut spans = vec![(usize::MAX, 0usize); t_tgt];
        for &(i, j) in &self.pairs {
            let span = &mut spans[j];
            span.0 = span.0.min(i);
            span.1 = span.1.max(i);
        }
        spans
    }
}

// DP state layout per cell: slot 0 entered by a diagonal step (also the
// start cell), slots 1..=k a horizontal run of that length, slots
// k+1..=2k a vertical run.
const D_SLOT: usize = 0;

/// Highest-scoring feasible path through `scores`.
///
/// Feasible means: monotone unit steps anchored at both corners, every
/// visited cell allowed by `mask`, and no more than `max_consec`
/// consecutive horizontal steps or consecutive vertical steps. Ties prefer
/// diagonal over horizontal over vertical steps.
pub fn backtrack(
    scores: &ScoreMatrix,
    mask: &AttentionMask,
    max_consec: usize,
) -> Result<WarpPath> {
    let (t_s, t_t) = (scores.t_src(), scores.t_tgt());
    if (t_s, t_t) != (mask.t_src(), mask.t_tgt()) {
        return Err(Error::shape(
            "backtrack",
            format!("scores {t_s}x{t_t}"),
            format!("mask {}x{}", mask.t_src(), mask.t_tgt()),
        ));
    }
    if max_consec == 0 {
        return Err(Error::InvalidArg("max_consec must be >= 1".into()));
    }
    // runs longer than the grid extent cannot occur
    let k = max_consec.min(t_s.max(t_t));
    let slots = 2 * k + 1;
    let idx = |i: usize, j: usize, s: usize| (i * t_t + j) * slots + s;
    let mut dp = vec![f64::NEG_INFINITY; t_s * t_t * slots];
    let mut bp = vec![u32::MAX; t_s * t_t * slots];

    for j in 0..t_t {
        let (lo, hi) = mask.column_support(j)?;
        let mut reachable = false;
        for i in lo..=hi {
            let sc = scores.get(i, j);
            if !sc.is_finite() {
                return Err(Error::NonFinite(format!("similarity score at ({i}, {j})")));
            }
            if i == 0 && j == 0 {
                dp[idx(0, 0, D_SLOT)] = sc;
                reachable = true;
                continue;
            }
            // strict improvement keeps the earliest slot on ties, and
            // slots are ordered D, then H, then V
            let consider = |dp: &[f64], cell: &mut (f64, u32), base: usize, slot: usize| {
                let v = dp[base + slot];
                if v > cell.0 {
                    *cell = (v, slot as u32);
                }
            };
            if i > 0 && j > 0 {
                let base = idx(i - 1, j - 1, 0);
                let mut best = (f64::NEG_INFINITY, u32::MAX);
                for s in 0..slots {
                    consider(&dp, &mut best, base, s);
                }
                if best.0.is_finite() {
                    dp[idx(i, j, D_SLOT)] = sc + best.0;
                    bp[idx(i, j, D_SLOT)] = best.1;
                }
            }
            if j > 0 {
                let base = idx(i, j - 1, 0);
                // fresh horizontal run: previous step was diagonal or vertical
                let mut best = (f64::NEG_INFINITY, u32::MAX);
                consider(&dp, &mut best, base, D_SLOT);
                for s in k + 1..slots {
                    consider(&dp, &mut best, base, s);
                }
                if best.0.is_finite() {
                    dp[idx(i, j, 1)] = sc + best.0;
                    bp[idx(i, j, 1)] = best.1;
                }
                // extended horizontal run
                for c in 2..=k {
                    let v = dp[base + c - 1];
                    if v > f64::NEG_INFINITY {
                        dp[idx(i, j, c)] = sc + v;
                        bp[idx(i, j, c)] = (c - 1) as u32;
                    }
                }
            }
            if i > 0 {
                let base = idx(i - 1, j, 0);
                let mut best = (f64::NEG_INFINITY, u32::MAX);
                consider(&dp, &mut best, base, D_SLOT);
                for s in 1..=k {
                    consider(&dp, &mut best, base, s);
                }
                if best.0.is_finite() {
                    dp[idx(i, j, k + 1)] = sc + best.0;
                    bp[idx(i, j, k + 1)] = best.1;
                }
                for c in 2..=k {
                    let v = dp[base + k + c - 1];
                    if v > f64::NEG_INFINITY {
                        dp[idx(i, j, k + c)] = sc + v;
                        bp[idx(i, j, k + c)] = (k + c - 1) as u32;
                    }
                }
            }
            reachable |= (0..slots).any(|s| dp[idx(i, j, s)].is_finite());
        }
        if !reachable {
            return Err(Error::NoFeasiblePath { column: j });
        }
    }

    let corner = idx(t_s - 1, t_t - 1, 0);
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for s in 0..slots {
        if dp[corner + s] > best.0 {
            best = (dp[corner + s], s);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::NoFeasiblePath { column: t_t - 1 });
    }

    let (mut i, mut j, mut s) = (t_s - 1, t_t - 1, best.1);
    let mut pairs = Vec::new();
    loop {
        pairs.push((i, j));
        if i == 0 && j == 0 {
            break;
        }
        let prev = bp[idx(i, j, s)] as usize;
        if s == D_SLOT {
            i -= 1;
            j -= 1;
        } else if s <= k {
            j -= 1;
        } else {
            i -= 1;
        }
        s = prev;
    }
    pairs.reverse();
    Ok(WarpPath { pairs })
}

/// Closed-loop alignment: mean absolute frame distance as similarity, then
/// constrained backtracking. Requires the true target, so it serves as the
/// reference an attention-based path is compared against.
pub fn dtw_align(
    x: &FeatureSequence,
    y: &FeatureSequence,
    mask: &AttentionMask,
    max_consec: usize,
) -> Result<WarpPath> {
    if x.n_mels() != y.n_mels() {
        return Err(Error::shape(
            "dtw_align",
            format!("{} mel bands", x.n_mels()),
            format!("{} mel bands", y.n_mels()),
        ));
    }
    let d = x.n_mels() as f64;
    let scores = ScoreMatrix::from_fn(x.n_frames(), y.n_frames(), |i, j| {
        let dist: f64 = x
            .frame(i)
            .iter()
            .zip(y.frame(j))
            .map(|(a, b)| (a - b).abs())
            .sum();
        -dist / d
    })?;
    backtrack(&scores, mask, max_consec)
}

/// Classify each path step as H, D, or V.
pub fn encode_moves(path: &WarpPath) -> MoveSequence {
    let moves = path
        .pairs
        .windows(2)
        .map(|w| {
            match (w[1].0 - w[0].0, w[1].1 - w[0].1) {
                (0, 1) => Move::H,
                (1, 1) => Move::D,
                (1, 0) => Move::V,
                step => panic!("non-unit path step {step:?}"),
            }
        })
        .collect();
    MoveSequence { moves }
}

fn levenshtein(a: &[Move], b: &[Move]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &am) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bm) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(am != bm);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit-distance agreement of two move sequences, normalized by their
/// average length and clamped to `[0, 1]`; 1 means identical.
pub fn match_ratio(a: &MoveSequence, b: &MoveSequence) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence("move sequence"));
    }
    let dist = levenshtein(&a.moves, &b.moves) as f64;
    let avg = (a.len() + b.len()) as f64 / 2.0;
    Ok((1.0 - dist / avg).clamp(0.0, 1.0))
}

/// Length-prediction error in milliseconds per second of true target
/// speech. Both lengths are frame counts at the same hop, so the hop
/// cancels out of the ratio.
pub fn length_error_ms_per_sec(t_hat: usize, t_true: usize, hop_ms: f64) -> Result<f64> {
    if t_true == 0 {
        return Err(Error::InvalidArg("true length must be >= 1".into()));
    }
    let err_ms = (t_hat as f64 - t_true as f64).abs() * hop_ms;
    let dur_sec = t_true as f64 * hop_ms / 1000.0;
    Ok(err_ms / dur_sec)
}

/// A stored alignment: the path plus the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentFile {
    pub t_src: usize,
    pub t_tgt: usize,
    pub slope: f64,
    pub max_consec: usize,
    pub path: WarpPath,
}

/// Write an alignment as text: a `#`-prefixed settings header, then one
/// `i<TAB>j` pair per line.
pub fn write_alignment(path: impl AsRef<Path>, a: &AlignmentFile) -> Result<()> {
    let mut out = format!(
        "# T_s={} T_t={} slope={} max_consec={}\n",
        a.t_src, a.t_tgt, a.slope, a.max_consec
    );
    for &(i, j) in &a.path.pairs {
        out.push_str(&format!("{i}\t{j}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read an alignment written by [`write_alignment`].
pub fn read_alignment(path: impl AsRef<Path>) -> Result<AlignmentFile> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::FileFormat("empty alignment file".into()))?;
    let rest = header
        .strip_prefix('#')
        .ok_or_else(|| Error::FileFormat("alignment header must start with '#'".into()))?;
    let (mut t_src, mut t_tgt, mut slope, mut max_consec) = (None, None, None, None);
    for token in rest.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| Error::FileFormat(format!("bad header token '{token}'")))?;
        let parse_err = |_| Error::FileFormat(format!("bad header value '{token}'"));
        match key {
            "T_s" => t_src = Some(value.parse::<usize>().map_err(parse_err)?),
            "T_t" => t_tgt = Some(value.parse::<usize>().map_err(parse_err)?),
            "slope" => slope = Some(value.parse::<f64>().map_err(|_| {
                Error::FileFormat(format!("bad header value '{token}'"))
            })?),
            "max_consec" => max_consec = Some(value.parse::<usize>().map_err(parse_err)?),
            other => return Err(Error::FileFormat(format!("unknown header key '{other}'"))),
        }
    }
    let (t_src, t_tgt, slope, max_consec) = match (t_src, t_tgt, slope, max_consec) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => return Err(Error::FileFormat("alignment header is missing a field".into())),
    };
    let mut pairs = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (i, j) = line
            .split_once('\t')
            .ok_or_else(|| Error::FileFormat(format!("bad alignment line '{line}'")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::FileFormat(format!("bad alignment line '{line}'")))
        };
        pairs.push((parse(i)?, parse(j)?));
    }
    let path = WarpPath { pairs };
    path.validate(t_src, t_tgt, None, None)
        .map_err(|e| Error::FileFormat(format!("alignment path invalid: {e}")))?;
    Ok(AlignmentFile {
        t_src,
        t_tgt,
        slope,
        max_consec,
        path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::build_mask;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Recursive enumeration of every feasible path; the optimum it finds
    /// is the yardstick the DP must meet exactly.
    fn exhaustive_best(
        scores: &ScoreMatrix,
        mask: &AttentionMask,
        max_consec: usize,
    ) -> Option<f64> {
        fn go(
            scores: &ScoreMatrix,
            mask: &AttentionMask,
            cap: usize,
            i: usize,
            j: usize,
            last: Option<Move>,
            run: usize,
            acc: f64,
            best: &mut Option<f64>,
        ) {
            let acc = acc + scores.get(i, j);
            if i == scores.t_src() - 1 && j == scores.t_tgt() - 1 {
                if best.map_or(true, |b| acc > b) {
                    *best = Some(acc);
                }
                return;
            }
            for (mv, di, dj) in [
                (Move::D, 1, 1),
                (Move::H, 0, 1),
                (Move::V, 1, 0),
            ] {
                let (ni, nj) = (i + di, j + dj);
                if ni >= scores.t_src() || nj >= scores.t_tgt() || !mask.allowed(ni, nj) {
                    continue;
                }
                let nrun = if Some(mv) == last { run + 1 } else { 1 };
                if mv != Move::D && nrun > cap {
                    continue;
                }
                go(scores, mask, cap, ni, nj, Some(mv), nrun, acc, best);
            }
        }
        let mut best = None;
        if mask.allowed(0, 0) {
            go(scores, mask, max_consec, 0, 0, None, 0, 0.0, &mut best);
        }
        best
    }

    fn path_score(scores: &ScoreMatrix, path: &WarpPath) -> f64 {
        path.pairs.iter().map(|&(i, j)| scores.get(i, j)).sum()
    }

    fn random_scores(rng: &mut ChaCha8Rng, t_s: usize, t_t: usize) -> ScoreMatrix {
        ScoreMatrix::from_fn(t_s, t_t, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn single_cell_path() {
        let scores = ScoreMatrix::zeros(1, 1).unwrap();
        let mask = AttentionMask::full(1, 1).unwrap();
        let path = backtrack(&scores, &mask, 1).unwrap();
        assert_eq!(path.pairs, vec![(0, 0)]);
        assert!(encode_moves(&path).is_empty());
    }

    #[test]
    fn diagonal_dominant_four_by_four() {
        let scores = ScoreMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap();
        let mask = AttentionMask::full(4, 4).unwrap();
        let path = backtrack(&scores, &mask, 1).unwrap();
        assert_eq!(encode_moves(&path).to_string(), "DDD");
    }

    #[test]
    fn random_matrix_matches_exhaustive_optimum() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores = random_scores(&mut rng, 5, 6);
            let mask = AttentionMask::full(5, 6).unwrap();
            let want = exhaustive_best(&scores, &mask, 1).unwrap();
            let path = backtrack(&scores, &mask, 1).unwrap();
            assert!(
                (path_score(&scores, &path) - want).abs() < 1e-12,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn masked_and_rectangular_match_exhaustive() {
        for seed in 0..8u64 {
            for (t_s, t_t) in [(4, 6), (6, 4), (5, 5), (6, 6)] {
                for cap in [1usize, 2] {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 100 + t_s as u64);
                    let scores = random_scores(&mut rng, t_s, t_t);
                    let mask = build_mask(t_s, t_t, 2.0).unwrap();
                    let want = exhaustive_best(&scores, &mask, cap);
                    match backtrack(&scores, &mask, cap) {
                        Ok(path) => {
                            path.validate(t_s, t_t, Some(&mask), Some(cap)).unwrap();
                            let got = path_score(&scores, &path);
                            assert!(
                                (got - want.unwrap()).abs() < 1e-12,
                                "{t_s}x{t_t} cap {cap} seed {seed}"
                            );
                        }
                        Err(_) => assert!(want.is_none()),
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_grid_names_column() {
        // 5 source frames against 2 target frames: four source advances
        // but only one column change to break them up
        let scores = ScoreMatrix::zeros(5, 2).unwrap();
        let mask = AttentionMask::full(5, 2).unwrap();
        match backtrack(&scores, &mask, 1) {
            Err(Error::NoFeasiblePath { column }) => assert_eq!(column, 1),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn huge_cap_reduces_to_plain_dtw() {
        fn plain_best(scores: &ScoreMatrix) -> f64 {
            let (t_s, t_t) = (scores.t_src(), scores.t_tgt());
            let mut dp = vec![f64::NEG_INFINITY; t_s * t_t];
            for i in 0..t_s {
                for j in 0..t_t {
                    let mut best = if i == 0 && j == 0 { 0.0 } else { f64::NEG_INFINITY };
                    if i > 0 && j > 0 {
                        best = best.max(dp[(i - 1) * t_t + j - 1]);
                    }
                    if j > 0 {
                        best = best.max(dp[i * t_t + j - 1]);
                    }
                    if i > 0 {
                        best = best.max(dp[(i - 1) * t_t + j]);
                    }
                    dp[i * t_t + j] = best + scores.get(i, j);
                }
            }
            dp[t_s * t_t - 1]
        }
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores = random_scores(&mut rng, 8, 9);
            let mask = AttentionMask::full(8, 9).unwrap();
            let path = backtrack(&scores, &mask, usize::MAX).unwrap();
            assert!((path_score(&scores, &path) - plain_best(&scores)).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_prefer_diagonal() {
        // all-zero scores: every feasible path ties, so the returned one
        // should be pure diagonal
        let scores = ScoreMatrix::from_fn(4, 4, |_, _| 0.0).unwrap();
        let mask = AttentionMask::full(4, 4).unwrap();
        let path = backtrack(&scores, &mask, 3).unwrap();
        assert_eq!(encode_moves(&path).to_string(), "DDD");
    }

    #[test]
    fn self_alignment_is_diagonal() {
        let mut x = FeatureSequence::new(3, 10.0);
        for t in 0..5 {
            x.push_frame(&[t as f64, (t * t) as f64, 1.0 - t as f64]).unwrap();
        }
        let mask = AttentionMask::full(5, 5).unwrap();
        let path = dtw_align(&x, &x, &mask, 1).unwrap();
        assert_eq!(encode_moves(&path).to_string(), "DDDD");
    }

    #[test]
    fn duplicated_target_frames_pair_each_source_twice() {
        let mut x = FeatureSequence::new(2, 10.0);
        for t in 0..4 {
            x.push_frame(&[t as f64 * 3.0, 10.0 - t as f64]).unwrap();
        }
        let mut y = FeatureSequence::new(2, 10.0);
        for t in 0..4 {
            let f = x.frame(t).to_vec();
            y.push_frame(&f).unwrap();
            y.push_frame(&f).unwrap();
        }
        let mask = AttentionMask::full(4, 8).unwrap();
        let path = dtw_align(&x, &y, &mask, 1).unwrap();
        for (i, j) in path.pairs.iter().copied() {
            assert!(j == 2 * i || j == 2 * i + 1, "({i}, {j}) off the duplicate band");
        }
        // the DP optimum must also equal the enumerated optimum
        let d = x.n_mels() as f64;
        let scores = ScoreMatrix::from_fn(4, 8, |i, j| {
            let dist: f64 = x
                .frame(i)
                .iter()
                .zip(y.frame(j))
                .map(|(a, b)| (a - b).abs())
                .sum();
            -dist / d
        })
        .unwrap();
        let want = exhaustive_best(&scores, &mask, 1).unwrap();
        assert!((path_score(&scores, &path) - want).abs() < 1e-12);
    }

    #[test]
    fn mel_band_mismatch_rejected() {
        let x = FeatureSequence::new(3, 10.0);
        let y = FeatureSequence::new(4, 10.0);
        let mask = AttentionMask::full(1, 1).unwrap();
        assert!(dtw_align(&x, &y, &mask, 1).is_err());
    }

    #[test]
    fn encode_moves_examples() {
        let p = WarpPath {
            pairs: vec![(0, 0), (1, 1), (2, 2), (3, 3)],
        };
        assert_eq!(encode_moves(&p).to_string(), "DDD");
        let p = WarpPath {
            pairs: vec![(0, 0), (0, 1), (1, 2)],
        };
        assert_eq!(encode_moves(&p).to_string(), "HD");
    }

    #[test]
    fn match_ratio_examples() {
        let a: MoveSequence = "DDD".parse().unwrap();
        assert!((match_ratio(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b: MoveSequence = "DDH".parse().unwrap();
        let got = match_ratio(&a, &b).unwrap();
        assert!((got - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        let empty = MoveSequence { moves: vec![] };
        assert!(match_ratio(&a, &empty).is_err());
    }

    #[test]
    fn length_error_examples() {
        assert_eq!(length_error_ms_per_sec(50, 50, 10.0).unwrap(), 0.0);
        assert!((length_error_ms_per_sec(104, 100, 10.0).unwrap() - 40.0).abs() < 1e-12);
        assert!(length_error_ms_per_sec(5, 0, 10.0).is_err());
    }

    #[test]
    fn alignment_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.align");
        let a = AlignmentFile {
            t_src: 3,
            t_tgt: 4,
            slope: 1.25,
            max_consec: 1,
            path: WarpPath {
                pairs: vec![(0, 0), (0, 1), (1, 2), (2, 3)],
            },
        };
        write_alignment(&file, &a).unwrap();
        assert_eq!(read_alignment(&file).unwrap(), a);
    }

    #[test]
    fn malformed_alignment_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("b.align");
        std::fs::write(&file, "no header\n0\t0\n").unwrap();
        assert!(read_alignment(&file).is_err());
        std::fs::write(&file, "# T_s=2 T_t=2 slope=1 max_consec=1\n0\t0\n0 1\n").unwrap();
        assert!(read_alignment(&file).is_err());
        // path not anchored at the far corner
        std::fs::write(&file, "# T_s=3 T_t=3 slope=1 max_consec=1\n0\t0\n1\t1\n").unwrap();
        assert!(read_alignment(&file).is_err());
    }

    fn lev_oracle(a: &[Move], b: &[Move]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = lev_oracle(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = lev_oracle(&a[1..], b) + 1;
        let ins = lev_oracle(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    fn moves_strategy(max_len: usize) -> impl Strategy<Value = MoveSequence> {
        proptest::collection::vec(
            prop_oneof![Just(Move::H), Just(Move::D), Just(Move::V)],
            1..=max_len,
        )
        .prop_map(|moves| MoveSequence { moves })
    }

    proptest! {
        #[test]
        fn match_ratio_symmetric_and_bounded(a in moves_strategy(7), b in moves_strategy(7)) {
            let ab = match_ratio(&a, &b).unwrap();
            let ba = match_ratio(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let expect = (1.0 - lev_oracle(&a.moves, &b.moves) as f64
                / ((a.len() + b.len()) as f64 / 2.0))
                .clamp(0.0, 1.0);
            prop_assert!((ab - expect).abs() < 1e-12);
        }

        #[test]
        fn returned_paths_satisfy_all_invariants(
            seed in 0u64..200,
            t_s in 2usize..12,
            t_t in 2usize..12,
            cap in 1usize..4,
            slope in prop_oneof![Just(1.25), Just(2.0), Just(3.0)],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores = random_scores(&mut rng, t_s, t_t);
            let mask = build_mask(t_s, t_t, slope).unwrap();
            if let Ok(path) = backtrack(&scores, &mask, cap) {
                path.validate(t_s, t_t, Some(&mask), Some(cap)).unwrap();
                let moves = encode_moves(&path);
                prop_assert_eq!(moves.len(), path.pairs.len() - 1);
            }
        }
    }
}
