use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{ComplexImage, KSpaceData};
use crate::error::{validation, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform(height: usize, width: usize, data: &[f64], inverse: bool) -> Vec<f64> {
    let n = height * width;
    assert_eq!(data.len(), 2 * n, "stacked planes length");
    let mut buf: Vec<Complex64> = (0..n).map(|k| Complex64::new(data[k], data[n + k])).collect();
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            (p.plan_fft_inverse(width), p.plan_fft_inverse(height))
        } else {
            (p.plan_fft_forward(width), p.plan_fft_forward(height))
        }
    });
    // rows are contiguous
    row_fft.process(&mut buf);
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for r in 0..height {
        for c in 0..width {
            col[c * height + r] = buf[r * width + c];
        }
    }
    col_fft.process(&mut col);
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = vec![0.0; 2 * n];
    for r in 0..height {
        for c in 0..width {
            let v = col[c * height + r];
            out[r * width + c] = v.re * scale;
            out[n + r * width + c] = v.im * scale;
        }
    }
    out
}

/// Unitary forward 2D DFT on stacked `[re, im]` planes.
pub fn dft2_planes(height: usize, width: usize, data: &[f64]) -> Vec<f64> {
    transform(height, width, data, false)
}

/// Unitary inverse 2D DFT on stacked `[re, im]` planes.
pub fn idft2_planes(height: usize, width: usize, data: &[f64]) -> Vec<f64> {
    transform(height, width, data, true)
}

fn ensure_finite(data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(validation("non-finite input to DFT"))
    }
}

pub fn dft2_unitary(x: &ComplexImage) -> Result<KSpaceData> {
    ensure_finite(x.as_slice())?;
    let (h, w) = x.shape();
    Ok(KSpaceData::from_vec_unchecked(h, w, dft2_planes(h, w, x.as_slice())))
}

pub fn idft2_unitary(y: &KSpaceData) -> Result<ComplexImage> {
    ensure_finite(y.as_slice())?;
    let (h, w) = y.shape();
    Ok(ComplexImage::from_vec_unchecked(h, w, idft2_planes(h, w, y.as_slice())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(n^2) unitary DFT, used only as an oracle.
    fn direct_dft(h: usize, w: usize, data: &[f64], sign: f64) -> Vec<f64> {
        let n = h * w;
        let mut out = vec![0.0; 2 * n];
        let scale = 1.0 / (n as f64).sqrt();
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let ph =
                            sign * 2.0 * std::f64::consts::PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        let (s, co) = ph.sin_cos();
                        let (a, b) = (data[r * w + c], data[n + r * w + c]);
                        sr += a * co - b * s;
                        si += a * s + b * co;
                    }
                }
                out[u * w + v] = sr * scale;
                out[n + u * w + v] = si * scale;
            }
        }
        out
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        ComplexImage::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn impulse_maps_to_flat_spectrum() {
        let mut re = vec![0.0; 16];
        re[0] = 1.0;
        let x = ComplexImage::from_real(4, 4, &re).unwrap();
        let y = dft2_unitary(&x).unwrap();
        for v in y.re() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(y.im().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_maps_to_dc() {
        let (h, w, c) = (6, 4, 0.7);
        let x = ComplexImage::from_real(h, w, &vec![c; h * w]).unwrap();
        let y = dft2_unitary(&x).unwrap();
        assert!((y.re()[0] - c * ((h * w) as f64).sqrt()).abs() < 1e-12);
        let rest: f64 = y
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 0)
            .map(|(_, v)| v.abs())
            .sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn matches_direct_summation_and_preserves_energy() {
        let x = random_image(8, 8, 3);
        let y = dft2_unitary(&x).unwrap();
        let oracle = direct_dft(8, 8, x.as_slice(), -1.0);
        for (a, b) in y.as_slice().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y.norm_sq() - x.norm_sq()).abs() < 1e-12 * x.norm_sq().max(1.0));
    }

    #[test]
    fn non_square_matches_direct_summation() {
        let x = random_image(4, 6, 9);
        let y = dft2_unitary(&x).unwrap();
        let oracle = direct_dft(4, 6, x.as_slice(), -1.0);
        for (a, b) in y.as_slice().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_only_kspace_inverts_to_constant() {
        let mut re = vec![0.0; 16];
        re[0] = 2.0;
        let y = KSpaceData::from_real(4, 4, &re).unwrap();
        let x = idft2_unitary(&y).unwrap();
        assert!(x.re().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn round_trip_and_linearity() {
        let x = random_image(8, 8, 11);
        let back = idft2_unitary(&dft2_unitary(&x).unwrap()).unwrap();
        assert!(back.distance(&x) < 1e-12);

        let y1 = KSpaceData::from_vec(8, 8, random_image(8, 8, 1).into_vec()).unwrap();
        let y2 = KSpaceData::from_vec(8, 8, random_image(8, 8, 2).into_vec()).unwrap();
        let (a, b) = (0.3, -1.7);
        let lhs = idft2_unitary(&y1.scaled(a).add(&y2.scaled(b))).unwrap();
        let oracle = direct_dft(8, 8, y1.scaled(a).add(&y2.scaled(b)).as_slice(), 1.0);
        let rhs = idft2_unitary(&y1)
            .unwrap()
            .scaled(a)
            .add(&idft2_unitary(&y2).unwrap().scaled(b));
        assert!(lhs.distance(&rhs) < 1e-12);
        for (p, q) in lhs.as_slice().iter().zip(&oracle) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_nan() {
        let mut x = vec![0.0; 8];
        x[1] = f64::NAN;
        let img = ComplexImage::from_vec_unchecked(2, 2, x);
        assert!(dft2_unitary(&img).is_err());
    }
}
