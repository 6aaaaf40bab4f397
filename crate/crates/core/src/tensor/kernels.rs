//! Raw `f64` loops shared by the tape and the sparse reference path.

use rayon::prelude::*;

use super::{dim_err, TensorError};

/// Products below this many multiply-adds stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Each output row is produced by one thread with a fixed summation order over
/// `k`, so results do not depend on the worker count.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, c_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a, b, &mut c);
    c
}

pub(crate) fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Interprets a rank-3 `[C,H,W]` or rank-4 `[B,C,H,W]` shape.
pub(crate) fn split_image_shape(
    shape: &[usize],
    op: &'static str,
) -> Result<(usize, usize, usize, usize), TensorError> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(dim_err(op, format!("expected rank 3 or 4, got shape {shape:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn columns(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Lowers a batch of images to a `[C*kh*kw, B*OH*OW]` column matrix.
pub(crate) fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let ncols = d.columns();
    let plane = d.out_h * d.out_w;
    let mut cols = vec![0.0; d.patch() * ncols];
    for c in 0..d.in_ch {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..d.batch {
                    let src = &x[(b * d.in_ch + c) * d.h * d.w..(b * d.in_ch + c + 1) * d.h * d.w];
                    for oy in 0..d.out_h {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let base = b * plane + oy * d.out_w;
                        for ox in 0..d.out_w {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[base + ox] = src[iy as usize * d.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], d: &ConvDims) -> Vec<f64> {
    let ncols = d.columns();
    let plane = d.out_h * d.out_w;
    let mut x = vec![0.0; d.batch * d.in_ch * d.h * d.w];
    for c in 0..d.in_ch {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..d.batch {
                    let off = (b * d.in_ch + c) * d.h * d.w;
                    for oy in 0..d.out_h {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let base = b * plane + oy * d.out_w;
                        for ox in 0..d.out_w {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                x[off + iy as usize * d.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, B*P]` GEMM layout to `[B, N, P]` image layout.
pub(crate) fn columns_to_images(m: &[f64], n: usize, batch: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for o in 0..n {
        for b in 0..batch {
            let src = &m[o * batch * plane + b * plane..o * batch * plane + (b + 1) * plane];
            out[(b * n + o) * plane..(b * n + o + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn images_to_columns(x: &[f64], n: usize, batch: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..n {
        for b in 0..batch {
            let src = &x[(b * n + o) * plane..(b * n + o + 1) * plane];
            out[o * batch * plane + b * plane..o * batch * plane + (b + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// `out[b, c, y*r+i, x*r+j] = in[b, c*r*r + i*r + j, y, x]`.
pub(crate) fn pixel_shuffle(x: &[f64], b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for o in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    let ic = o * r * r + i * r + j;
                    let src = &x[((bi * c + ic) * h) * w..((bi * c + ic + 1) * h) * w];
                    for y in 0..h {
                        for xx in 0..w {
                            out[((bi * oc + o) * oh + y * r + i) * ow + xx * r + j] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]; `h`, `w` are the low-resolution dims.
pub(crate) fn pixel_unshuffle(x: &[f64], b: usize, oc: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let c = oc * r * r;
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for o in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    let ic = o * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            out[((bi * c + ic) * h + y) * w + xx] =
                                x[((bi * oc + o) * oh + y * r + i) * ow + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling of each `h×w` plane by `r`.
pub(crate) fn upsample_nearest(x: &[f64], planes: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * oh + y) * ow + xx] = x[(p * h + y / r) * w + xx / r];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_adjoint(g: &[f64], planes: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * h + y / r) * w + xx / r] += g[(p * oh + y) * ow + xx];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_hand_example() {
        let c = gemm(2, 2, 1, &[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0]);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn transpose_twice_is_identity() {
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(transpose(4, 3, &transpose(3, 4, &a)), a);
    }

    #[test]
    fn large_gemm_matches_serial_rows() {
        // crosses PAR_THRESHOLD so the parallel branch runs
        let (m, k, n) = (64, 80, 64);
        let a: Vec<f64> = (0..m * k).map(|v| ((v * 37 % 101) as f64 - 50.0) / 7.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| ((v * 53 % 97) as f64 - 48.0) / 5.0).collect();
        let c = gemm(m, k, n, &a, &b);
        for i in 0..m {
            let mut row = vec![0.0; n];
            gemm_acc(1, k, n, &a[i * k..(i + 1) * k], &b, &mut row);
            assert_eq!(&c[i * n..(i + 1) * n], row.as_slice());
        }
    }

    #[test]
    fn upsample_adjoint_sums_blocks() {
        let g = vec![1.0; 16];
        assert_eq!(upsample_nearest_adjoint(&g, 1, 2, 2, 2), vec![4.0; 4]);
    }
}
