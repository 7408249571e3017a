//! Test-only oracles that share no code path with the library's FFT/CG route.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Real `2n x 2n` representation of `A = M F` (unitary DFT), built from the
/// DFT definition. Unsampled rows are zero.
pub fn dense_forward(h: usize, w: usize, keep: &[bool]) -> Vec<Vec<f64>> {
    let n = h * w;
    let scale = 1.0 / (n as f64).sqrt();
    let mut a = vec![vec![0.0; 2 * n]; 2 * n];
    for u in 0..h {
        for v in 0..w {
            let row = u * w + v;
            if !keep[row] {
                continue;
            }
            for r in 0..h {
                for c in 0..w {
                    let col = r * w + c;
                    let ph = -2.0 * std::f64::consts::PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                    let (s, co) = ph.sin_cos();
                    // (re_out, im_out) = (co*re - s*im, s*re + co*im)
                    a[row][col] = co * scale;
                    a[row][n + col] = -s * scale;
                    a[n + row][col] = s * scale;
                    a[n + row][n + col] = co * scale;
                }
            }
        }
    }
    a
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, n) = (a.len(), a[0].len());
    (0..n).map(|j| (0..m).map(|i| a[i][j]).collect()).collect()
}

pub fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let bt = transpose(b);
    a.iter()
        .map(|row| {
            bt.iter()
                .map(|col| row.iter().zip(col).map(|(p, q)| p * q).sum())
                .collect()
        })
        .collect()
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            if f != 0.0 {
                let (top, rest) = a.split_at_mut(i);
                for (aij, akj) in rest[0][k..].iter_mut().zip(&top[k][k..]) {
                    *aij -= f * akj;
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

/// `(A^T A + lambda I)^{-1} (A^T y + lambda z)` by dense elimination.
pub fn dense_dc(h: usize, w: usize, keep: &[bool], lambda: f64, y: &[f64], z: &[f64]) -> Vec<f64> {
    let a = dense_forward(h, w, keep);
    let at = transpose(&a);
    let mut k = matmul(&at, &a);
    for (i, row) in k.iter_mut().enumerate() {
        row[i] += lambda;
    }
    let mut rhs = matvec(&at, y);
    for (r, zv) in rhs.iter_mut().zip(z) {
        *r += lambda * zv;
    }
    solve(k, rhs)
}

pub fn random_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_keep(len: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<bool> = (0..len).map(|_| rng.random_bool(p)).collect();
    keep[0] = true;
    keep
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|q| q * q).sum::<f64>().sqrt();
    num / den.max(1e-300)
}
