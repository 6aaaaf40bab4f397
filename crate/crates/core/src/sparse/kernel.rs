//! Tiled row-axpy GEMM kernels over BCS and dense weights.
//!
//! Every output element accumulates its terms in increasing column-list
//! order no matter how the loops are tiled, unrolled or split across
//! threads, so all schedules give bit-identical results.

use serde::{Deserialize, Serialize};

use super::{BcsMatrix, Scalar, SparseError};

/// Width of one column-tile unit, in output elements.
pub const STRIP: usize = 16;

/// Execution schedule of the GEMM kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Weight rows processed together.
    pub tile_rows: usize,
    /// Output column tile, in units of [`STRIP`] elements.
    pub tile_cols: usize,
    /// Non-zeros per row applied per pass over a tile.
    pub tile_depth: usize,
    /// Manual unroll of the innermost axpy.
    pub unroll: usize,
    pub threads: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            tile_rows: 16,
            tile_cols: 16,
            tile_depth: 16,
            unroll: 1,
            threads: 1,
        }
    }
}

impl KernelConfig {
    pub fn single_thread(self) -> Self {
        Self { threads: 1, ..self }
    }

    fn sanitized(self) -> Self {
        Self {
            tile_rows: self.tile_rows.max(1),
            tile_cols: self.tile_cols.max(1),
            tile_depth: self.tile_depth.max(1),
            unroll: self.unroll.max(1),
            threads: self.threads.max(1),
        }
    }
}

#[inline(always)]
fn axpy_unrolled<T: Scalar, const U: usize>(y: &mut [T], a: T, x: &[T]) {
    let mut yc = y.chunks_exact_mut(U);
    let mut xc = x.chunks_exact(U);
    for (yy, xx) in (&mut yc).zip(&mut xc) {
        for i in 0..U {
            yy[i] = yy[i] + a * xx[i];
        }
    }
    for (yy, &xx) in yc.into_remainder().iter_mut().zip(xc.remainder()) {
        *yy = *yy + a * xx;
    }
}

fn axpy<T: Scalar>(unroll: usize, y: &mut [T], a: T, x: &[T]) {
    match unroll {
        1 => axpy_unrolled::<T, 1>(y, a, x),
        2 => axpy_unrolled::<T, 2>(y, a, x),
        4 => axpy_unrolled::<T, 4>(y, a, x),
        8 => axpy_unrolled::<T, 8>(y, a, x),
        16 => axpy_unrolled::<T, 16>(y, a, x),
        _ => axpy_unrolled::<T, 1>(y, a, x),
    }
}

/// One weight row: its column indices (`None` for a dense row) and values.
type RowRef<'a, T> = (Option<&'a [u32]>, &'a [T]);

fn run_rows<'a, T: Scalar>(
    rows: &[RowRef<'a, T>],
    outs: &mut [&mut [T]],
    x: &[T],
    n: usize,
    cfg: &KernelConfig,
) {
    let tw = cfg.tile_cols * STRIP;
    for (block, out_block) in rows.chunks(cfg.tile_rows).zip(outs.chunks_mut(cfg.tile_rows)) {
        let depth = block.iter().map(|r| r.1.len()).max().unwrap_or(0);
        for n0 in (0..n).step_by(tw) {
            let n1 = (n0 + tw).min(n);
            for d0 in (0..depth).step_by(cfg.tile_depth) {
                for ((cols, w), y) in block.iter().zip(out_block.iter_mut()) {
                    let d1 = (d0 + cfg.tile_depth).min(w.len());
                    let y = &mut y[n0..n1];
                    for k in d0..d1 {
                        let c = match cols {
                            Some(c) => c[k] as usize,
                            None => k,
                        };
                        axpy(cfg.unroll, y, w[k], &x[c * n + n0..c * n + n1]);
                    }
                }
            }
        }
    }
}

/// Splits `rows` into at most `threads` contiguous ranges of similar work.
fn balanced_ranges<T>(rows: &[RowRef<'_, T>], threads: usize) -> Vec<std::ops::Range<usize>> {
    let threads = threads.min(rows.len()).max(1);
    let total: usize = rows.iter().map(|r| r.1.len() + 1).sum();
    let mut out = Vec::with_capacity(threads);
    let (mut start, mut acc) = (0, 0);
    for (i, r) in rows.iter().enumerate() {
        acc += r.1.len() + 1;
        let remaining_rows = rows.len() - i - 1;
        let remaining_threads = threads - out.len() - 1;
        if out.len() + 1 < threads
            && (acc * threads >= total * (out.len() + 1) || remaining_rows == remaining_threads)
        {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < rows.len() {
        out.push(start..rows.len());
    }
    out
}

fn execute<T: Scalar>(rows: &[RowRef<'_, T>], mut outs: Vec<&mut [T]>, x: &[T], n: usize, cfg: KernelConfig) {
    let cfg = cfg.sanitized();
    if cfg.threads == 1 || rows.len() < 2 {
        run_rows(rows, &mut outs, x, n, &cfg);
        return;
    }
    let ranges = balanced_ranges(rows, cfg.threads);
    std::thread::scope(|s| {
        let mut rest: &mut [&mut [T]] = &mut outs;
        for r in ranges {
            let (mine, tail) = rest.split_at_mut(r.len());
            rest = tail;
            let rows = &rows[r];
            s.spawn(move || run_rows(rows, mine, x, n, &cfg));
        }
    });
}

/// `m · x` for `x` of shape `m.cols() × n`, rows returned in original order.
pub fn spmm<T: Scalar>(m: &BcsMatrix<T>, x: &[T], n: usize, cfg: &KernelConfig) -> Result<Vec<T>, SparseError> {
    let mut out = vec![T::ZERO; m.rows() * n];
    spmm_into(m, x, n, cfg, &mut out)?;
    Ok(out)
}

/// Like [`spmm`], overwriting a caller-provided `rows × n` buffer.
pub fn spmm_into<T: Scalar>(
    m: &BcsMatrix<T>,
    x: &[T],
    n: usize,
    cfg: &KernelConfig,
    out: &mut [T],
) -> Result<(), SparseError> {
    if x.len() != m.cols() * n || out.len() != m.rows() * n {
        return Err(SparseError::Shape(format!(
            "spmm of {}x{} with rhs of {} values (n = {n}) into {}",
            m.rows(),
            m.cols(),
            x.len(),
            out.len()
        )));
    }
    out.fill(T::ZERO);
    if n == 0 {
        return Ok(());
    }
    let mut rows: Vec<RowRef<'_, T>> = Vec::with_capacity(m.rows());
    for g in 0..m.groups() {
        let cols = m.group_cols(g);
        for pos in m.occurrence[g] as usize..m.occurrence[g + 1] as usize {
            rows.push((Some(cols), m.row_weights(pos)));
        }
    }
    let mut by_row: Vec<Option<&mut [T]>> = out.chunks_mut(n).map(Some).collect();
    let outs: Vec<&mut [T]> = m
        .permutation()
        .iter()
        .map(|&r| by_row[r as usize].take().expect("permutation is a bijection"))
        .collect();
    execute(&rows, outs, x, n, *cfg);
    Ok(())
}

/// Dense `a · x` with `a` of shape `rows × k`, using the same schedule as [`spmm`].
pub fn dense_gemm<T: Scalar>(
    a: &[T],
    rows: usize,
    k: usize,
    x: &[T],
    n: usize,
    cfg: &KernelConfig,
) -> Result<Vec<T>, SparseError> {
    let mut out = vec![T::ZERO; rows * n];
    dense_gemm_into(a, rows, k, x, n, cfg, &mut out)?;
    Ok(out)
}

pub fn dense_gemm_into<T: Scalar>(
    a: &[T],
    rows: usize,
    k: usize,
    x: &[T],
    n: usize,
    cfg: &KernelConfig,
    out: &mut [T],
) -> Result<(), SparseError> {
    if a.len() != rows * k || x.len() != k * n || out.len() != rows * n {
        return Err(SparseError::Shape(format!(
            "dense gemm {rows}x{k} with rhs of {} values (n = {n}) into {}",
            x.len(),
            out.len()
        )));
    }
    out.fill(T::ZERO);
    if n == 0 || k == 0 {
        return Ok(());
    }
    let row_refs: Vec<RowRef<'_, T>> = a.chunks(k).map(|r| (None, r)).collect();
    let outs: Vec<&mut [T]> = out.chunks_mut(n).collect();
    execute(&row_refs, outs, x, n, *cfg);
    Ok(())
}
