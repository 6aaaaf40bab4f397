use serde::{Deserialize, Serialize};

use super::SparseError;
use crate::search_space::PruningScheme;

/// Which axis of a block is pruned: whole columns or whole rows inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockAxis {
    #[default]
    Column,
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockDims {
    pub p: usize,
    pub q: usize,
    pub axis: BlockAxis,
}

impl Default for BlockDims {
    /// q = 20 makes every default grid ratio an exact column count.
    fn default() -> Self {
        Self {
            p: 4,
            q: 20,
            axis: BlockAxis::Column,
        }
    }
}

impl BlockDims {
    /// Block tiling of a `rows × cols` matrix; edge blocks are truncated.
    pub fn blocks(&self, rows: usize, cols: usize) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let (p, q) = (self.p.max(1), self.q.max(1));
        let mut out = Vec::new();
        for r0 in (0..rows).step_by(p) {
            for c0 in (0..cols).step_by(q) {
                out.push((r0..(r0 + p).min(rows), c0..(c0 + q).min(cols)));
            }
        }
        out
    }
}

/// 3×3 binary patterns with four retained entries, indexed row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternLibrary {
    patterns: Vec<[bool; 9]>,
}

impl Default for PatternLibrary {
    /// Center plus three of the four edge neighbours, then center plus three corners.
    fn default() -> Self {
        let mut patterns = Vec::new();
        for ring in [[1, 3, 5, 7], [0, 2, 6, 8]] {
            for skip in ring {
                let mut p = [false; 9];
                p[4] = true;
                ring.iter().filter(|&&c| c != skip).for_each(|&c| p[c] = true);
                patterns.push(p);
            }
        }
        Self { patterns }
    }
}

impl PatternLibrary {
    pub fn new(patterns: Vec<[bool; 9]>) -> Result<Self, SparseError> {
        if patterns.is_empty() || patterns.iter().any(|p| p.iter().filter(|&&b| b).count() != 4) {
            return Err(SparseError::Shape("patterns must keep exactly 4 of 9 entries".into()));
        }
        Ok(Self { patterns })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn get(&self, id: usize) -> &[bool; 9] {
        &self.patterns[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[bool; 9]> {
        self.patterns.iter()
    }
}

/// Pattern retaining the most squared magnitude; the lowest id wins ties.
pub fn select_pattern(kernel: &[f64], lib: &PatternLibrary) -> usize {
    debug_assert_eq!(kernel.len(), 9);
    let mut best = (0, f64::NEG_INFINITY);
    for (id, p) in lib.iter().enumerate() {
        let kept: f64 = kernel.iter().zip(p).filter(|(_, &on)| on).map(|(w, _)| w * w).sum();
        if kept > best.1 {
            best = (id, kept);
        }
    }
    best.0
}

/// Smallest non-zero ratio a pattern mask can realise on 3×3 kernels.
pub fn pattern_floor() -> f64 {
    5.0 / 9.0
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskParams {
    pub block: BlockDims,
    pub library: PatternLibrary,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskDetail {
    Dense,
    Channel {
        pruned_rows: Vec<usize>,
    },
    Block {
        dims: BlockDims,
        /// Pruned column (or row) offsets inside each block, in block order.
        pruned: Vec<Vec<usize>>,
    },
    Pattern {
        /// Per kernel (row-major over `out × in`): the pattern id, or `None` when removed.
        kernels: Vec<Option<usize>>,
        /// Set when kernels are not 3×3 and only whole-kernel removal applies.
        connectivity_only: bool,
    },
}

/// A 0/1 keep-mask over a weight matrix with the structure that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    pub scheme: PruningScheme,
    pub rows: usize,
    pub cols: usize,
    pub keep: Vec<bool>,
    pub detail: MaskDetail,
}

impl SparsityMask {
    pub fn full(scheme: PruningScheme, rows: usize, cols: usize) -> Self {
        Self {
            scheme,
            rows,
            cols,
            keep: vec![true; rows * cols],
            detail: MaskDetail::Dense,
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn density(&self) -> f64 {
        self.kept() as f64 / self.keep.len().max(1) as f64
    }

    pub fn ratio(&self) -> f64 {
        1.0 - self.density()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }

    /// `weights ⊙ mask`.
    pub fn apply(&self, weights: &[f64]) -> Vec<f64> {
        weights.iter().zip(&self.keep).map(|(&w, &k)| if k { w } else { 0.0 }).collect()
    }
}

fn count_at_least(ratio: f64, units: usize) -> usize {
    ((ratio * units as f64 - 1e-9).ceil().max(0.0) as usize).min(units)
}

/// Indices of the `k` smallest values, ties broken by lower index.
fn smallest(norms: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// Magnitude-based structured mask for a `rows × cols` GEMM view.
///
/// `kernel` is `(kh, kw)`; `cols` must be a multiple of `kh·kw`. Ratio 0
/// yields the full mask for every scheme.
pub fn make_mask(
    weights: &[f64],
    rows: usize,
    cols: usize,
    kernel: (usize, usize),
    scheme: PruningScheme,
    ratio: f64,
    params: &MaskParams,
) -> Result<SparsityMask, SparseError> {
    if weights.len() != rows * cols {
        return Err(SparseError::Shape(format!(
            "{} weights for a {rows}x{cols} matrix",
            weights.len()
        )));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(SparseError::InvalidRatio(ratio));
    }
    let mut mask = SparsityMask::full(scheme, rows, cols);
    if ratio == 0.0 {
        return Ok(mask);
    }
    match scheme {
        PruningScheme::Channel => {
            let norms: Vec<f64> = weights.chunks(cols.max(1)).map(|r| r.iter().map(|w| w * w).sum()).collect();
            let pruned = smallest(&norms, count_at_least(ratio, rows));
            for &r in &pruned {
                mask.keep[r * cols..(r + 1) * cols].fill(false);
            }
            mask.detail = MaskDetail::Channel { pruned_rows: pruned };
        }
        PruningScheme::Block => {
            let dims = params.block;
            let mut all = Vec::new();
            for (rr, cr) in dims.blocks(rows, cols) {
                let pruned = match dims.axis {
                    BlockAxis::Column => {
                        let norms: Vec<f64> = cr
                            .clone()
                            .map(|c| rr.clone().map(|r| weights[r * cols + c].powi(2)).sum())
                            .collect();
                        let pruned = smallest(&norms, count_at_least(ratio, cr.len()));
                        for &j in &pruned {
                            rr.clone().for_each(|r| mask.keep[r * cols + cr.start + j] = false);
                        }
                        pruned
                    }
                    BlockAxis::Row => {
                        let norms: Vec<f64> = rr
                            .clone()
                            .map(|r| cr.clone().map(|c| weights[r * cols + c].powi(2)).sum())
                            .collect();
                        let pruned = smallest(&norms, count_at_least(ratio, rr.len()));
                        for &i in &pruned {
                            cr.clone().for_each(|c| mask.keep[(rr.start + i) * cols + c] = false);
                        }
                        pruned
                    }
                };
                all.push(pruned);
            }
            mask.detail = MaskDetail::Block { dims, pruned: all };
        }
        PruningScheme::Pattern => {
            let area = kernel.0 * kernel.1;
            if area == 0 || cols % area != 0 {
                return Err(SparseError::Shape(format!(
                    "{cols} columns are not a multiple of the {}x{} kernel",
                    kernel.0, kernel.1
                )));
            }
            let n_kernels = rows * cols / area;
            let is3x3 = kernel == (3, 3);
            let mut ids = vec![None; n_kernels];
            let mut norms = vec![0.0; n_kernels];
            let kept_kernels = if is3x3 {
                if ratio < pattern_floor() - 1e-12 {
                    return Err(SparseError::Granularity {
                        scheme,
                        ratio,
                        floor: pattern_floor(),
                    });
                }
                for (k, kw) in weights.chunks(9).enumerate() {
                    let id = select_pattern(kw, &params.library);
                    let p = params.library.get(id);
                    ids[k] = Some(id);
                    norms[k] = kw.iter().zip(p).filter(|(_, &on)| on).map(|(w, _)| w * w).sum();
                    for (j, &on) in p.iter().enumerate() {
                        mask.keep[k * 9 + j] = on;
                    }
                }
                (((1.0 - ratio) * 9.0 * n_kernels as f64 / 4.0) + 1e-9).floor() as usize
            } else {
                for (k, kw) in weights.chunks(area).enumerate() {
                    norms[k] = kw.iter().map(|w| w * w).sum();
                }
                n_kernels - count_at_least(ratio, n_kernels)
            };
            for k in smallest(&norms, n_kernels - kept_kernels.min(n_kernels)) {
                ids[k] = None;
                mask.keep[k * area..(k + 1) * area].fill(false);
            }
            if !is3x3 {
                ids.iter_mut().zip(&mask.keep.chunks(area).collect::<Vec<_>>()).for_each(|(id, ch)| {
                    *id = ch[0].then_some(0);
                });
            }
            mask.detail = MaskDetail::Pattern {
                kernels: ids,
                connectivity_only: !is3x3,
            };
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn library_is_distinct_four_of_nine() {
        let lib = PatternLibrary::default();
        assert_eq!(lib.len(), 8);
        for (i, a) in lib.iter().enumerate() {
            assert_eq!(a.iter().filter(|&&b| b).count(), 4);
            for b in lib.iter().skip(i + 1) {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn select_pattern_matches_support_and_ties() {
        let lib = PatternLibrary::default();
        for (id, p) in lib.iter().enumerate() {
            let k: Vec<f64> = p.iter().map(|&on| if on { 2.0 } else { 0.5 }).collect();
            assert_eq!(select_pattern(&k, &lib), id);
        }
        assert_eq!(select_pattern(&[1.0; 9], &lib), 0);
    }

    #[test]
    fn select_pattern_equals_exhaustive_argmax() {
        let lib = PatternLibrary::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let k = random(&mut rng, 9);
            let scores: Vec<f64> = lib
                .iter()
                .map(|p| (0..9).filter(|&j| p[j]).map(|j| k[j] * k[j]).sum())
                .collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let expect = scores.iter().position(|&s| s == best).unwrap();
            assert_eq!(select_pattern(&k, &lib), expect);
        }
    }

    #[test]
    fn channel_prunes_smallest_row() {
        let w = [1.0, 0.0, 0.0, 0.1];
        let m = make_mask(&w, 2, 2, (1, 1), PruningScheme::Channel, 0.5, &MaskParams::default()).unwrap();
        assert_eq!(m.keep, vec![true, true, false, false]);
        assert_eq!(m.detail, MaskDetail::Channel { pruned_rows: vec![1] });
    }

    #[test]
    fn whole_matrix_block_reduces_to_channel_and_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, cols) = (12, 18);
        let w = random(&mut rng, rows * cols);
        let whole_rows = MaskParams {
            block: BlockDims { p: rows, q: cols, axis: BlockAxis::Row },
            ..Default::default()
        };
        let a = make_mask(&w, rows, cols, (3, 3), PruningScheme::Block, 0.5, &whole_rows).unwrap();
        let b = make_mask(&w, rows, cols, (3, 3), PruningScheme::Channel, 0.5, &MaskParams::default()).unwrap();
        assert_eq!(a.keep, b.keep);

        let whole_cols = MaskParams {
            block: BlockDims { p: rows, q: cols, axis: BlockAxis::Column },
            ..Default::default()
        };
        let c = make_mask(&w, rows, cols, (3, 3), PruningScheme::Block, 0.5, &whole_cols).unwrap();
        // every row shares the same pruned column set
        let first: Vec<bool> = c.keep[..cols].to_vec();
        assert!(c.keep.chunks(cols).all(|r| r == first.as_slice()));
        assert_eq!(first.iter().filter(|&&k| !k).count(), 9);
    }

    #[test]
    fn pattern_keeps_four_of_nine_and_floor_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&mut rng, 8 * 4 * 9);
        let p = MaskParams::default();
        let err = make_mask(&w, 8, 36, (3, 3), PruningScheme::Pattern, 0.5, &p).unwrap_err();
        assert!(matches!(err, SparseError::Granularity { .. }));
        let m = make_mask(&w, 8, 36, (3, 3), PruningScheme::Pattern, 0.75, &p).unwrap();
        for k in m.keep.chunks(9) {
            let kept = k.iter().filter(|&&b| b).count();
            assert!(kept == 4 || kept == 0);
        }
        assert!(m.ratio() >= 0.75 - 1e-12);
        let floor = make_mask(&w, 8, 36, (3, 3), PruningScheme::Pattern, 5.0 / 9.0, &p).unwrap();
        assert!((floor.ratio() - 5.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_zero_is_full_and_bad_ratio_rejected() {
        let w = vec![0.5; 9 * 4];
        for s in PruningScheme::ALL {
            let m = make_mask(&w, 4, 9, (3, 3), s, 0.0, &MaskParams::default()).unwrap();
            assert_eq!(m.kept(), 36);
        }
        assert!(matches!(
            make_mask(&w, 4, 9, (3, 3), PruningScheme::Channel, 1.0, &MaskParams::default()),
            Err(SparseError::InvalidRatio(_))
        ));
    }

    #[test]
    fn achieved_density_within_one_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MaskParams::default();
        for _ in 0..200 {
            let rows = rng.gen_range(4..40);
            let in_ch = rng.gen_range(2..12);
            let cols = in_ch * 9;
            let w = random(&mut rng, rows * cols);
            let r: f64 = rng.gen_range(0.56..0.97);
            for s in PruningScheme::ALL {
                let m = make_mask(&w, rows, cols, (3, 3), s, r, &p).unwrap();
                let unit = match s {
                    PruningScheme::Channel => 1.0 / rows as f64,
                    // one column of the narrowest (edge) block
                    PruningScheme::Block => {
                        let edge = if cols % p.block.q == 0 { p.block.q } else { cols % p.block.q };
                        1.0 / edge as f64
                    }
                    PruningScheme::Pattern => 4.0 / 9.0 / (rows * in_ch) as f64,
                };
                assert!(m.ratio() >= r - 1e-9, "{s}: {} < {r}", m.ratio());
                assert!(m.ratio() - r <= unit + 1e-9, "{s}: {} vs {r} unit {unit}", m.ratio());
            }
        }
    }

    #[test]
    fn non_square_pattern_layers_use_connectivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random(&mut rng, 8 * 16);
        let m = make_mask(&w, 8, 16, (1, 1), PruningScheme::Pattern, 0.25, &MaskParams::default()).unwrap();
        assert_eq!(m.kept(), 96);
        assert!(matches!(m.detail, MaskDetail::Pattern { connectivity_only: true, .. }));
    }
}
