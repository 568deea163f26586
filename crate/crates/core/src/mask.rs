//! Binary attention masks shaped like an Itakura parallelogram.
//!
//! A mask over a `T_s x T_t` grid admits cell `(i, j)` when the point lies
//! inside two cones: one opening from `(0, 0)` and one from
//! `(T_s-1, T_t-1)`, both with slopes between `r/slope` and `r*slope`
//! where `r` is the overall length ratio, with a half-cell tolerance so
//! the corners stay inside. The cone test runs in both grid orientations
//! and a cell passing either is admitted; the one-sided test is not
//! invariant under transposition (the half-cell slack does not rescale
//! with the ratio), while the two-sided closure is, and it also leaves no
//! row or column empty. Grids with a single row or column degenerate to a
//! fully allowed mask, and any column starved by rounding is repaired
//! with the single cell nearest the global diagonal so dynamic
//! programming over the mask stays feasible.

use crate::{Error, Result};

/// Default mask slope.
pub const DEFAULT_SLOPE: f64 = 1.25;

const EPS: f64 = 0.5;
// boundary cells sit exactly on the cone lines for rational ratios; this
// slack absorbs product rounding so the inclusive comparisons stay inclusive
const BOUNDARY_TOL: f64 = 1e-9;

/// Binary alignment mask with one contiguous allowed interval per target
/// column.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    t_src: usize,
    t_tgt: usize,
    slope: f64,
    /// Inclusive (lo, hi) source-index interval per target column.
    cols: Vec<(usize, usize)>,
}

impl AttentionMask {
    /// Source length `T_s` (rows).
    pub fn t_src(&self) -> usize {
        self.t_src
    }

    /// Target length `T_t` (columns).
    pub fn t_tgt(&self) -> usize {
        self.t_tgt
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    /// Whether cell `(i, j)` is allowed.
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        if i >= self.t_src || j >= self.t_tgt {
            return false;
        }
        let (lo, hi) = self.cols[j];
        i >= lo && i <= hi
    }

    /// First and last allowed row of column `j`.
    pub fn column_support(&self, j: usize) -> Result<(usize, usize)> {
        self.cols
            .get(j)
            .copied()
            .ok_or(Error::IndexOutOfRange {
                index: j,
                len: self.t_tgt,
            })
    }

    /// Mask admitting every cell; useful as the unconstrained baseline.
    pub fn full(t_src: usize, t_tgt: usize) -> Result<AttentionMask> {
        if t_src == 0 || t_tgt == 0 {
            return Err(Error::InvalidArg(format!(
                "mask needs non-zero lengths, got {t_src}x{t_tgt}"
            )));
        }
        Ok(AttentionMask {
            t_src,
            t_tgt,
            slope: f64::INFINITY,
            cols: vec![(0, t_src - 1); t_tgt],
        })
    }

    /// True when every pair of `path` is an allowed cell.
    pub fn contains_path(&self, path: &[(usize, usize)]) -> bool {
        path.iter().all(|&(i, j)| self.allowed(i, j))
    }

    /// One grayscale pixel per cell, row-major with source frames as rows:
    /// 255 allowed, 0 blocked.
    pub fn to_pixels(&self) -> Vec<u8> {
        let mut px = vec![0u8; self.t_src * self.t_tgt];
        for j in 0..self.t_tgt {
            let (lo, hi) = self.cols[j];
            for i in lo..=hi {
                px[i * self.t_tgt + j] = 255;
            }
        }
        px
    }
}

/// Overall length ratio used for the cone slopes; 1 when either side is a
/// single frame.
pub fn length_ratio(t_src: usize, t_tgt: usize) -> f64 {
    if t_src <= 1 || t_tgt <= 1 {
        1.0
    } else {
        (t_tgt - 1) as f64 / (t_src - 1) as f64
    }
}

fn cones_allow(i: usize, j: usize, t_src: usize, t_tgt: usize, r: f64, slope: f64) -> bool {
    let (i, j) = (i as f64, j as f64);
    let (ri, rj) = ((t_src - 1) as f64 - i, (t_tgt - 1) as f64 - j);
    let e = EPS + BOUNDARY_TOL;
    j <= slope * r * i + e
        && j >= (r / slope) * i - e
        && rj <= slope * r * ri + e
        && rj >= (r / slope) * ri - e
}

/// Build the mask for a `t_src x t_tgt` grid at the given slope.
pub fn build_mask(t_src: usize, t_tgt: usize, slope: f64) -> Result<AttentionMask> {
    if t_src == 0 || t_tgt == 0 {
        return Err(Error::InvalidArg(format!(
            "mask needs non-zero lengths, got {t_src}x{t_tgt}"
        )));
    }
    if !(slope >= 1.0) {
        return Err(Error::InvalidArg(format!(
            "mask slope must be >= 1, got {slope}"
        )));
    }
    if t_src == 1 || t_tgt == 1 {
        // a single row or column carries no slope information; only the
        // fully allowed mask keeps both corners reachable
        return Ok(AttentionMask {
            t_src,
            t_tgt,
            slope,
            cols: vec![(0, t_src - 1); t_tgt],
        });
    }
    let r_fwd = length_ratio(t_src, t_tgt);
    let r_rev = length_ratio(t_tgt, t_src);
    let mut cols = Vec::with_capacity(t_tgt);
    for j in 0..t_tgt {
        let mut lo = None;
        let mut hi = 0;
        for i in 0..t_src {
            if cones_allow(i, j, t_src, t_tgt, r_fwd, slope)
                || cones_allow(j, i, t_tgt, t_src, r_rev, slope)
            {
                lo.get_or_insert(i);
                hi = i;
            }
        }
        let (lo, hi) = match lo {
            Some(lo) => (lo, hi),
            None => {
                let diag = ((j as f64 * r_rev).round() as usize).min(t_src - 1);
                (diag, diag)
            }
        };
        cols.push((lo, hi));
    }
    Ok(AttentionMask {
        t_src,
        t_tgt,
        slope,
        cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct cell-by-cell evaluation of the cone inequalities in one
    /// orientation, kept separate from the construction under test.
    fn one_sided(i: usize, j: usize, t_src: usize, t_tgt: usize, slope: f64) -> bool {
        let r = if t_src <= 1 || t_tgt <= 1 {
            1.0
        } else {
            (t_tgt as f64 - 1.0) / (t_src as f64 - 1.0)
        };
        let (fi, fj) = (i as f64, j as f64);
        let e = 0.5 + 1e-9;
        let a = fj <= slope * r * fi + e;
        let b = fj >= (r / slope) * fi - e;
        let c = (t_tgt as f64 - 1.0 - fj) <= slope * r * (t_src as f64 - 1.0 - fi) + e;
        let d = (t_tgt as f64 - 1.0 - fj) >= (r / slope) * (t_src as f64 - 1.0 - fi) - e;
        a && b && c && d
    }

    fn oracle_allowed(i: usize, j: usize, t_src: usize, t_tgt: usize, slope: f64) -> bool {
        if t_src == 1 || t_tgt == 1 {
            return true;
        }
        one_sided(i, j, t_src, t_tgt, slope) || one_sided(j, i, t_tgt, t_src, slope)
    }

    fn oracle_mask(t_src: usize, t_tgt: usize, slope: f64) -> Vec<Vec<bool>> {
        let mut cells = vec![vec![false; t_tgt]; t_src];
        for (i, row) in cells.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = oracle_allowed(i, j, t_src, t_tgt, slope);
            }
        }
        let r_rev = length_ratio(t_tgt, t_src);
        for j in 0..t_tgt {
            if (0..t_src).all(|i| !cells[i][j]) {
                let diag = ((j as f64 * r_rev).round() as usize).min(t_src - 1);
                cells[diag][j] = true;
            }
        }
        cells
    }

    #[test]
    fn single_cell_grid() {
        for slope in [1.0, 1.25, 7.0] {
            let m = build_mask(1, 1, slope).unwrap();
            assert!(m.allowed(0, 0));
            assert_eq!(m.column_support(0).unwrap(), (0, 0));
        }
    }

    #[test]
    fn slope_one_square_is_diagonal() {
        let m = build_mask(5, 5, 1.0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.allowed(i, j), i == j, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn five_by_five_slope_two_matches_oracle() {
        let m = build_mask(5, 5, 2.0).unwrap();
        let oracle = oracle_mask(5, 5, 2.0);
        for (i, row) in oracle.iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                assert_eq!(m.allowed(i, j), want, "cell ({i},{j})");
            }
        }
        // hand-worked column supports for this grid
        let supports = [(0, 1), (0, 2), (1, 3), (2, 4), (3, 4)];
        for (j, &want) in supports.iter().enumerate() {
            assert_eq!(m.column_support(j).unwrap(), want, "column {j}");
        }
    }

    #[test]
    fn corner_columns_anchor() {
        let m = build_mask(5, 5, 1.0).unwrap();
        assert_eq!(m.column_support(0).unwrap(), (0, 0));
        assert_eq!(m.column_support(4).unwrap(), (4, 4));
    }

    #[test]
    fn column_out_of_range() {
        let m = build_mask(4, 3, 1.25).unwrap();
        assert!(matches!(
            m.column_support(3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(build_mask(0, 5, 1.25).is_err());
        assert!(build_mask(5, 0, 1.25).is_err());
        assert!(build_mask(5, 5, 0.5).is_err());
        assert!(build_mask(5, 5, f64::NAN).is_err());
    }

    #[test]
    fn thin_columns_still_reach_the_diagonal() {
        // 21 target frames against 5 source frames at slope 1: the forward
        // cones are thinner than one cell per column, so coverage leans on
        // the transposed orientation
        let m = build_mask(5, 21, 1.0).unwrap();
        let r = 5.0;
        for j in 0..21 {
            let (lo, hi) = m.column_support(j).unwrap();
            assert!(lo <= hi);
            let diag = ((j as f64 / r).round() as usize).min(4);
            assert!(lo <= diag && diag <= hi, "column {j} misses the diagonal");
        }
    }

    #[test]
    fn full_mask_admits_everything() {
        let m = AttentionMask::full(3, 7).unwrap();
        for i in 0..3 {
            for j in 0..7 {
                assert!(m.allowed(i, j));
            }
        }
        assert!(!m.allowed(3, 0));
        assert!(!m.allowed(0, 7));
    }

    #[test]
    fn pixels_draw_rows_as_source_frames() {
        let m = build_mask(5, 5, 1.0).unwrap();
        let px = m.to_pixels();
        assert_eq!(px.len(), 25);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(px[i * 5 + j], if i == j { 255 } else { 0 });
            }
        }
    }

    fn dims_and_slope() -> impl Strategy<Value = (usize, usize, f64)> {
        (1usize..=40, 1usize..=40, prop_oneof![
            Just(1.0),
            Just(1.25),
            Just(2.0),
            Just(3.0)
        ])
    }

    proptest! {
        #[test]
        fn matches_oracle_everywhere((t_s, t_t, slope) in dims_and_slope()) {
            let m = build_mask(t_s, t_t, slope).unwrap();
            let oracle = oracle_mask(t_s, t_t, slope);
            for i in 0..t_s {
                for j in 0..t_t {
                    prop_assert_eq!(m.allowed(i, j), oracle[i][j]);
                }
            }
        }

        #[test]
        fn structural_invariants((t_s, t_t, slope) in dims_and_slope()) {
            let m = build_mask(t_s, t_t, slope).unwrap();
            prop_assert!(m.allowed(0, 0));
            prop_assert!(m.allowed(t_s - 1, t_t - 1));
            let mut row_hit = vec![false; t_s];
            let mut prev = (0usize, 0usize);
            for j in 0..t_t {
                let (lo, hi) = m.column_support(j).unwrap();
                prop_assert!(lo <= hi);
                if j > 0 {
                    prop_assert!(lo >= prev.0, "lo dropped at column {}", j);
                    prop_assert!(hi >= prev.1, "hi dropped at column {}", j);
                }
                prev = (lo, hi);
                for flag in row_hit.iter_mut().take(hi + 1).skip(lo) {
                    *flag = true;
                }
            }
            prop_assert!(row_hit.iter().all(|&h| h), "some source row has no allowed cell");
        }

        #[test]
        fn wider_slopes_admit_every_narrower_cell((t_s, t_t) in (1usize..=40, 1usize..=40),
                                                  pair in prop_oneof![
                                                      Just((1.0, 1.25)),
                                                      Just((1.25, 2.0)),
                                                      Just((2.0, 3.0)),
                                                      Just((1.0, 3.0))
                                                  ]) {
            let (narrow, wide) = pair;
            let a = build_mask(t_s, t_t, narrow).unwrap();
            let b = build_mask(t_s, t_t, wide).unwrap();
            for i in 0..t_s {
                for j in 0..t_t {
                    if a.allowed(i, j) {
                        prop_assert!(b.allowed(i, j), "cell ({},{}) lost at slope {}", i, j, wide);
                    }
                }
            }
        }

        #[test]
        fn transpose_swaps_the_axes_exactly((t_s, t_t, slope) in dims_and_slope()) {
            let a = build_mask(t_s, t_t, slope).unwrap();
            let b = build_mask(t_t, t_s, slope).unwrap();
            for i in 0..t_s {
                for j in 0..t_t {
                    prop_assert_eq!(a.allowed(i, j), b.allowed(j, i), "cell ({},{})", i, j);
                }
            }
        }

        #[test]
        fn bounded_slope_staircases_stay_inside(t_s in 4usize..=30,
                                                ratio_mil in 900u32..=1100,
                                                slope in prop_oneof![Just(1.5), Just(2.0), Just(3.0)],
                                                seed in 0u64..200) {
            // random monotone paths whose cumulative slope from both
            // endpoints stays within [r/slope, r*slope] never leave the mask
            let t_t = ((t_s as f64 - 1.0) * ratio_mil as f64 / 1000.0).round() as usize + 1;
            let r = (t_t as f64 - 1.0) / (t_s as f64 - 1.0);
            let m = build_mask(t_s, t_t, slope).unwrap();
            let bounds_ok = |i: usize, j: usize| -> bool {
                // a point level with a corner on one axis only has
                // cumulative slope 0 or infinity on that side
                if (i == 0) != (j == 0) || (i == t_s - 1) != (j == t_t - 1) {
                    return false;
                }
                if i > 0 {
                    let sl = j as f64 / i as f64;
                    if sl < r / slope - 1e-12 || sl > r * slope + 1e-12 {
                        return false;
                    }
                }
                if i < t_s - 1 {
                    let sl = (t_t - 1 - j) as f64 / (t_s - 1 - i) as f64;
                    if sl < r / slope - 1e-12 || sl > r * slope + 1e-12 {
                        return false;
                    }
                }
                true
            };
            let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
            let mut rand = move |n: usize| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as usize) % n
            };
            let mut found = None;
            'attempt: for _ in 0..50 {
                let (mut i, mut j) = (0, 0);
                let mut path = vec![(0, 0)];
                while (i, j) != (t_s - 1, t_t - 1) {
                    let mut options = Vec::new();
                    for (di, dj) in [(1, 1), (0, 1), (1, 0)] {
                        let (ni, nj) = (i + di, j + dj);
                        if ni < t_s && nj < t_t && bounds_ok(ni, nj) {
                            options.push((ni, nj));
                        }
                    }
                    if options.is_empty() {
                        continue 'attempt;
                    }
                    let pick = options[rand(options.len())];
                    i = pick.0;
                    j = pick.1;
                    path.push(pick);
                }
                found = Some(path);
                break;
            }
            prop_assume!(found.is_some());
            for &(i, j) in &found.unwrap() {
                prop_assert!(m.allowed(i, j), "path cell ({},{}) outside mask", i, j);
            }
        }
    }
}
