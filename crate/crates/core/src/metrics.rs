//! Image-quality metrics on magnitude images.

use crate::error::{validation, Result};
use crate::fourier::ComplexImage;

fn check_same(x: &ComplexImage, t: &ComplexImage) -> Result<()> {
    if x.shape() != t.shape() {
        return Err(validation(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            x.shape(),
            t.shape()
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` between magnitude images, with `peak = max |t|`.
/// Identical images give `+inf`.
pub fn psnr(x: &ComplexImage, t: &ComplexImage) -> Result<f64> {
    check_same(x, t)?;
    let (mx, mt) = (x.magnitude(), t.magnitude());
    let peak = mt.iter().cloned().fold(0.0, f64::max);
    let mse = mx.iter().zip(&mt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / mt.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(j, t)| t * p[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(i, t)| t * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM between magnitude images over all fully contained 11x11
/// Gaussian windows, with dynamic range `max |t|`.
pub fn ssim(x: &ComplexImage, t: &ComplexImage) -> Result<f64> {
    check_same(x, t)?;
    let (h, w) = t.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(validation(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let (a, b) = (x.magnitude(), t.magnitude());
    let range = b.iter().cloned().fold(0.0, f64::max);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a, h, w, &taps);
    let mu_b = filter_valid(&b, h, w, &taps);
    let e_aa = filter_valid(&prod(&a, &a), h, w, &taps);
    let e_bb = filter_valid(&prod(&b, &b), h, w, &taps);
    let e_ab = filter_valid(&prod(&a, &b), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}
