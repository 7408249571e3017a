//! Synthetic ground truth: overlapping soft-edged ellipses with a mild
//! low-frequency texture, scaled into `[-1, 1]`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use smug_core::fourier::{ComplexImage, ForwardOperator, KSpaceData};
use smug_core::rng::{gaussian_vec, rng_for};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: usize,
    /// Inclusive range of inner ellipses per image.
    pub n_ellipses: (usize, usize),
    /// Range of the additive intensity of each inner ellipse.
    pub intensity: (f64, f64),
    /// Amplitude of the smooth texture.
    pub texture: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            n_ellipses: (3, 8),
            intensity: (-0.5, 0.5),
            texture: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= 2
            && self.size.is_multiple_of(2)
            && self.n_ellipses.0 <= self.n_ellipses.1
            && self.intensity.0 <= self.intensity.1
            && self.texture >= 0.0;
        if !ok {
            return Err(HarnessError::Config(format!("invalid phantom spec {self:?}")));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    /// Soft indicator: 1 well inside, 0 well outside, a logistic ramp across
    /// the boundary.
    fn weight(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let rho = (u * u + v * v).sqrt();
        1.0 / (1.0 + ((rho - 1.0) / 0.04).exp())
    }
}

fn one_phantom(spec: &PhantomSpec, index: u64) -> ComplexImage {
    let n = spec.size;
    let mut rng = rng_for(spec.seed, &[0x5048, index]);
    let head = Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        a: rng.random_range(0.7..0.85),
        b: rng.random_range(0.55..0.75),
        cos: 1.0,
        sin: 0.0,
        value: rng.random_range(0.6..0.9),
    };
    let count = rng.random_range(spec.n_ellipses.0..=spec.n_ellipses.1);
    let mut shapes = vec![head];
    for _ in 0..count {
        let th: f64 = rng.random_range(0.0..PI);
        shapes.push(Ellipse {
            cx: rng.random_range(-0.5..0.5),
            cy: rng.random_range(-0.45..0.45),
            a: rng.random_range(0.08..0.35),
            b: rng.random_range(0.08..0.3),
            cos: th.cos(),
            sin: th.sin(),
            value: if spec.intensity.0 < spec.intensity.1 {
                rng.random_range(spec.intensity.0..spec.intensity.1)
            } else {
                spec.intensity.0
            },
        });
    }
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..4.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let jitter = gaussian_vec(spec.seed, &[0x5048, index, 1], n * n, 1.0);
    let mut re = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let y = 2.0 * (r as f64 + 0.5) / n as f64 - 1.0;
            let x = 2.0 * (c as f64 + 0.5) / n as f64 - 1.0;
            let inside = shapes[0].weight(x, y);
            let mut v: f64 = shapes.iter().map(|e| e.value * e.weight(x, y)).sum();
            let tex: f64 = waves
                .iter()
                .map(|(fx, fy, ph)| (PI * (fx * x + fy * y) + ph).cos())
                .sum::<f64>()
                / 3.0;
            v += inside * spec.texture * (tex + 0.25 * jitter[r * n + c]);
            re[r * n + c] = v;
        }
    }
    let peak = re.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        re.iter_mut().for_each(|v| *v /= peak);
    }
    ComplexImage::from_real(n, n, &re).expect("finite phantom")
}

/// `n` phantoms; image `i` depends only on `(spec, i)`.
pub fn generate_phantoms(spec: &PhantomSpec, n: usize) -> Result<Vec<ComplexImage>> {
    spec.validate()?;
    if n == 0 {
        return Err(HarnessError::Config("at least one phantom is required".into()));
    }
    Ok((0..n as u64).map(|i| one_phantom(spec, i)).collect())
}

/// `y = A t`, plus i.i.d. Gaussian noise on sampled entries when
/// `noise_sigma > 0`.
pub fn simulate_measurements(
    t: &ComplexImage,
    op: &ForwardOperator,
    noise_sigma: f64,
    seed: u64,
) -> Result<KSpaceData> {
    let y = op.apply_forward(t)?;
    if noise_sigma == 0.0 {
        return Ok(y);
    }
    if !(noise_sigma > 0.0) {
        return Err(HarnessError::Config(format!(
            "measurement noise must be nonnegative, got {noise_sigma}"
        )));
    }
    let (h, w) = y.shape();
    let mut noise = gaussian_vec(seed, &[0x4d4e], 2 * h * w, noise_sigma);
    op.mask().apply_in_place(&mut noise);
    Ok(KSpaceData::from_vec(
        h,
        w,
        y.as_slice().iter().zip(noise).map(|(a, b)| a + b).collect(),
    )?)
}
