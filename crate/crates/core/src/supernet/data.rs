//! Procedural textures for the toy upscaling task.

use rand::Rng;

use crate::nn::{Dataset, NnError};
use crate::tensor::Tensor;

/// One `size × size` texture in `[0, 1]`: a few oriented sinusoids plus a
/// hard half-plane edge.
pub fn texture<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..=3))
        .map(|_| {
            (
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.5..4.0) * std::f64::consts::TAU / size as f64,
                rng.gen_range(0.0..std::f64::consts::PI),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let (cx, cy) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
    let psi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let step = rng.gen_range(0.5..1.5);
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let mut v: f64 = waves
                .iter()
                .map(|&(a, f, th, ph)| a * (f * (xf * th.cos() + yf * th.sin()) + ph).sin())
                .sum();
            if (xf - cx) * psi.cos() + (yf - cy) * psi.sin() > 0.0 {
                v += step;
            }
            img[y * size + x] = v;
        }
    }
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    img.iter_mut().for_each(|v| *v = (*v - lo) / span);
    img
}

/// `r × r` mean pooling of a square image.
pub fn downsample(img: &[f64], size: usize, r: usize) -> Vec<f64> {
    let s = size / r;
    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let mut acc = 0.0;
            for dy in 0..r {
                for dx in 0..r {
                    acc += img[(y * r + dy) * size + x * r + dx];
                }
            }
            out[y * s + x] = acc / (r * r) as f64;
        }
    }
    out
}

/// `n` (low-res `[1, lr, lr]`, high-res `[1, lr·r, lr·r]`) pairs.
pub fn texture_dataset<R: Rng + ?Sized>(n: usize, lr_size: usize, scale: usize, rng: &mut R) -> Result<Dataset, NnError> {
    let hr = lr_size * scale;
    let mut xs = Vec::with_capacity(n * lr_size * lr_size);
    let mut ys = Vec::with_capacity(n * hr * hr);
    for _ in 0..n {
        let img = texture(hr, rng);
        xs.extend(downsample(&img, hr, scale));
        ys.extend(img);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, lr_size, lr_size], xs)?,
        Tensor::new(vec![n, 1, hr, hr], ys)?,
    )
}
