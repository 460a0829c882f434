//! Pairwise image quality on the 8-bit scale.

use crate::{Error, Image, Result};

/// Value reported by PSNR and sharpness difference when the denominator is 0.
pub const PSNR_CAP: f64 = 100.0;
const PEAK: f64 = 255.0;
const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// 8-bit luminance plane (`0.299 R + 0.587 G + 0.114 B`, unrounded);
/// single-channel images use their only channel.
pub fn luminance8(img: &Image) -> Vec<f64> {
    let (c, h, w) = img.dims();
    let q = |ch: usize, y: usize, x: usize| Image::to_u8(img.get(ch, y, x)) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(if c >= 3 {
                0.299 * q(0, y, x) + 0.587 * q(1, y, x) + 0.114 * q(2, y, x)
            } else {
                q(0, y, x)
            });
        }
    }
    out
}

fn gaussian_window() -> [f64; WIN] {
    let mut g = [0.0; WIN];
    let half = (WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable Gaussian filter.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64; WIN]) -> Vec<f64> {
    let ow = w - WIN + 1;
    let oh = h - WIN + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WIN).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WIN).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h x w` planes on the 0..255 scale.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::Shape(format!("planes do not match {h} x {w}")));
    }
    if h < WIN || w < WIN {
        return Err(Error::Metric(format!("frame {h} x {w} is smaller than the {WIN} x {WIN} window")));
    }
    let g = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter(x, h, w, &g);
    let my = filter(y, h, w, &g);
    let sxx = filter(&prod(x, x), h, w, &g);
    let syy = filter(&prod(y, y), h, w, &g);
    let sxy = filter(&prod(x, y), h, w, &g);
    let c1 = (K1 * PEAK).powi(2);
    let c2 = (K2 * PEAK).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let va = sxx[i] - a * a;
            let vb = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM on 8-bit luminance.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    x.ensure_same_shape(y, "ssim inputs")?;
    ssim_plane(&luminance8(x), &luminance8(y), x.height(), x.width())
}

/// PSNR over all channels of the 8-bit images, capped at [`PSNR_CAP`].
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    x.ensure_same_shape(y, "psnr inputs")?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (Image::to_u8(a) as f64 - Image::to_u8(b) as f64).powi(2))
        .sum::<f64>()
        / x.data().len() as f64;
    Ok(capped_db(mse))
}

fn capped_db(denominator: f64) -> f64 {
    if denominator <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (PEAK * PEAK / denominator).log10()).min(PSNR_CAP)
}

/// Sharpness difference on 8-bit luminance: compares forward-difference
/// gradient magnitudes `|dx| + |dy|` over pixels where both differences
/// exist.
pub fn sharpness_difference(x: &Image, y: &Image) -> Result<f64> {
    x.ensure_same_shape(y, "sharpness inputs")?;
    let (h, w) = (x.height(), x.width());
    if h < 2 || w < 2 {
        return Err(Error::Metric(format!("frame {h} x {w} has no interior gradients")));
    }
    let (a, b) = (luminance8(x), luminance8(y));
    let grad = |p: &[f64], r: usize, c: usize| {
        (p[(r + 1) * w + c] - p[r * w + c]).abs() + (p[r * w + c + 1] - p[r * w + c]).abs()
    };
    let mut sum = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            sum += (grad(&a, r, c) - grad(&b, r, c)).abs();
        }
    }
    Ok(capped_db(sum / ((h - 1) * (w - 1)) as f64))
}
