//! Worst-case and random measurement perturbations, robustness errors and the
//! certified constants of the smoothed-unrolling bound.

mod sweep;

pub use sweep::{evaluate, sweep, EvalSetup, Evaluation, MetricsRow, SweepKind};

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{config, usage, Error, Result};
use crate::fourier::{alpha_constant, spectral_norm, ComplexImage, ForwardOperator, KSpaceData, SamplingMask};
use crate::models::{image_tensor, DenoiserNet};
use crate::reconstructors::{Pipeline, SmoothingConfig};
use crate::rng::{derive_seed, gaussian_vec, rng_for};

const STREAM_PGD: u64 = 0x5047;
const STREAM_BOX: u64 = 0x4258;
const STREAM_MEAS: u64 = 0x4d45;
const STREAM_LEMMA: u64 = 0x4c31;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// `epsilon = epsilon_scale * max |Re/Im y|`.
    pub epsilon_scale: f64,
    pub steps: usize,
    /// Step length as a multiple of `epsilon / steps`.
    pub step_factor: f64,
    pub seed: u64,
    /// Reuse one set of smoothing draws for every PGD step.
    pub freeze_smoothing_noise: bool,
    /// Absolute radius overriding `epsilon_scale`.
    pub epsilon: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon_scale: 0.02,
            steps: 10,
            step_factor: 2.5,
            seed: 0,
            freeze_smoothing_noise: true,
            epsilon: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let eps_ok = self.epsilon.is_none_or(|e| e >= 0.0 && e.is_finite());
        if !(self.epsilon_scale >= 0.0) || self.steps == 0 || !(self.step_factor > 0.0) || !eps_ok {
            return Err(config(format!("invalid attack config {self:?}")));
        }
        Ok(())
    }

    pub fn radius(&self, y: &KSpaceData) -> f64 {
        self.epsilon.unwrap_or_else(|| epsilon_from_data(y, self.epsilon_scale))
    }
}

/// `scale * max over entries of max(|Re|, |Im|)`.
pub fn epsilon_from_data(y: &KSpaceData, scale: f64) -> f64 {
    scale * y.max_abs_component()
}

#[derive(Clone, Debug)]
pub struct PerturbationResult {
    pub delta: KSpaceData,
    pub epsilon: f64,
    /// Objective at `delta`.
    pub objective: f64,
    /// Running best objective after each evaluation (`steps + 1` entries).
    pub history: Vec<f64>,
}

fn project(delta: &mut [f64], eps: f64, mask: &SamplingMask) {
    delta.iter_mut().for_each(|d| *d = d.clamp(-eps, eps));
    mask.apply_in_place(delta);
}

/// `||recon(y + delta) - t||^2` and, optionally, its gradient in `delta`.
pub fn attack_objective(
    pipe: &Pipeline,
    y: &KSpaceData,
    t: &ComplexImage,
    delta: &KSpaceData,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = pipe.models.bind(&mut tape, false);
    let yv = tape.constant(image_tensor(y));
    let dv = if with_grad {
        tape.leaf(image_tensor(delta))
    } else {
        tape.constant(image_tensor(delta))
    };
    let yp = tape.add(yv, dv)?;
    let trace = pipe.record(&mut tape, &vars, yp)?;
    let tv = tape.constant(image_tensor(t));
    let d = tape.sub(trace.output(), tv)?;
    let obj = tape.sum_squares(d);
    let value = tape.scalar(obj);
    if !with_grad {
        return Ok((value, None));
    }
    let g = tape.backward(obj)?.wrt(dv);
    if !g.data().iter().all(|v| v.is_finite()) {
        return Err(usage("attack gradient is not finite"));
    }
    Ok((value, Some(g.into_data())))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// l-infinity PGD on the measurements: signed-gradient ascent from zero,
/// clipped to the box and restricted to sampled locations after every step;
/// returns the best perturbation seen.
pub fn pgd_attack(pipe: &Pipeline, y: &KSpaceData, t: &ComplexImage, ac: &AttackConfig) -> Result<PerturbationResult> {
    ac.validate()?;
    let eps = ac.radius(y);
    let (h, w) = y.shape();
    let mask = pipe.op.mask();
    let step = ac.step_factor * eps / ac.steps as f64;
    let mut delta = KSpaceData::zeros(h, w)?;
    let mut best: Option<(f64, KSpaceData)> = None;
    let mut history = Vec::with_capacity(ac.steps + 1);
    for k in 0..=ac.steps {
        let sc = if ac.freeze_smoothing_noise {
            pipe.smoothing.clone()
        } else {
            SmoothingConfig {
                seed: derive_seed(ac.seed, &[STREAM_PGD, k as u64]),
                ..pipe.smoothing.clone()
            }
        };
        let p = pipe.with_smoothing(&sc);
        let last = k == ac.steps || eps == 0.0;
        let (obj, grad) = attack_objective(&p, y, t, &delta, !last)?;
        if best.as_ref().is_none_or(|(b, _)| obj > *b) {
            best = Some((obj, delta.clone()));
        }
        history.push(best.as_ref().expect("set above").0);
        if last {
            break;
        }
        let grad = grad.expect("requested");
        let mut next: Vec<f64> = delta
            .as_slice()
            .iter()
            .zip(&grad)
            .map(|(d, g)| d + step * sign(*g))
            .collect();
        project(&mut next, eps, mask);
        delta = KSpaceData::from_vec(h, w, next)?;
    }
    let (objective, delta) = best.expect("at least one evaluation");
    Ok(PerturbationResult {
        delta,
        epsilon: eps,
        objective,
        history,
    })
}

/// Uniform draw from the box `[-eps, eps]` on sampled locations.
pub fn random_box_delta(mask: &SamplingMask, eps: f64, seed: u64) -> Result<KSpaceData> {
    let (h, w) = (mask.height(), mask.width());
    let mut rng = rng_for(seed, &[STREAM_BOX]);
    let mut d: Vec<f64> = (0..2 * h * w)
        .map(|_| if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 })
        .collect();
    mask.apply_in_place(&mut d);
    KSpaceData::from_vec(h, w, d)
}

/// `y + eta` with i.i.d. `N(0, sigma^2)` on each real and imaginary entry.
pub fn gaussian_perturb(y: &KSpaceData, sigma: f64, seed: u64) -> Result<KSpaceData> {
    if !(sigma >= 0.0) {
        return Err(config(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    let (h, w) = y.shape();
    let eta = gaussian_vec(seed, &[STREAM_MEAS], 2 * h * w, sigma);
    KSpaceData::from_vec(h, w, y.as_slice().iter().zip(eta).map(|(a, b)| a + b).collect())
}

fn perturbed(y: &KSpaceData, delta: &KSpaceData) -> Result<KSpaceData> {
    if y.shape() != delta.shape() {
        return Err(crate::error::validation(
            "perturbation shape does not match the measurements",
        ));
    }
    Ok(y.add(delta))
}

/// `||x^n(A^H y) - x^n(A^H(y + delta))||` for every iterate `n = 0..N`, with
/// shared smoothing draws.
pub fn robustness_errors_by_step(pipe: &Pipeline, y: &KSpaceData, delta: &KSpaceData) -> Result<Vec<f64>> {
    let a = pipe.run(y)?;
    let b = pipe.run(&perturbed(y, delta)?)?;
    Ok(a.iterates.iter().zip(&b.iterates).map(|(p, q)| p.distance(q)).collect())
}

/// Robustness error of the final iterate.
pub fn robustness_error(pipe: &Pipeline, y: &KSpaceData, delta: &KSpaceData) -> Result<f64> {
    if delta.as_slice().iter().all(|d| *d == 0.0) {
        return Ok(0.0);
    }
    let a = pipe.run(y)?;
    let b = pipe.run(&perturbed(y, delta)?)?;
    Ok(a.output().distance(b.output()))
}

/// `r = M alpha / (sqrt(2 pi) sigma)`.
pub fn contraction_ratio(sigma: f64, m: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("the bound needs sigma > 0, got {sigma}")));
    }
    Ok(m * alpha / ((2.0 * PI).sqrt() * sigma))
}

/// `C_n = alpha ||A|| (1 - r^n)/(1 - r) + ||A|| r^n`, with the `r = 1` limit
/// `alpha ||A|| n + ||A||`.
pub fn theorem1_bound(n: u64, sigma: f64, m: f64, alpha: f64, opnorm: f64) -> Result<f64> {
    let r = contraction_ratio(sigma, m, alpha)?;
    let nf = n as f64;
    let geometric = if (r - 1.0).abs() < 1e-9 {
        // first-order expansion of (1 - r^n)/(1 - r) around r = 1
        nf + nf * (nf - 1.0) / 2.0 * (r - 1.0)
    } else {
        (1.0 - r.powf(nf)) / (1.0 - r)
    };
    Ok(alpha * opnorm * geometric + opnorm * r.powf(nf))
}

/// Operator constants entering the bound: `(||A||_2, alpha)` with
/// `alpha = ||(A^H A + lambda I)^{-1}||_2`.
pub fn operator_constants(op: &ForwardOperator, lambda: f64, seed: u64) -> Result<(f64, f64)> {
    let opnorm = spectral_norm(op, 500, 1e-12, seed)?.value;
    let alpha = alpha_constant(op, lambda)?.value;
    Ok((opnorm, alpha))
}

/// Twice the largest `||D(x)||` over random inputs of several magnitudes.
/// Not a certified bound; the architectural `bound_m` is.
pub fn empirical_bound_m(theta: &DenoiserNet, h: usize, w: usize, samples: usize, seed: u64) -> f64 {
    (0..samples)
        .map(|i| {
            let scale = 10f64.powi((i % 7) as i32 - 3);
            let x = gaussian_vec(seed, &[STREAM_LEMMA, 1, i as u64], 2 * h * w, scale);
            let d = theta.apply_planes(&x, h, w);
            2.0 * d.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub n: u64,
    pub sigma: f64,
    pub m: f64,
    pub alpha: f64,
    pub opnorm: f64,
    pub r: f64,
    pub c_n: f64,
    pub errors: Vec<f64>,
    pub delta_norms: Vec<f64>,
    pub holds: bool,
}

impl BoundReport {
    /// Audits measured `(error, ||delta||)` pairs against `C_n`.
    pub fn audit(n: u64, sigma: f64, m: f64, alpha: f64, opnorm: f64, pairs: &[(f64, f64)]) -> Result<Self> {
        let r = contraction_ratio(sigma, m, alpha)?;
        let c_n = theorem1_bound(n, sigma, m, alpha, opnorm)?;
        let holds = pairs.iter().all(|(e, d)| *e <= c_n * d);
        Ok(Self {
            n,
            sigma,
            m,
            alpha,
            opnorm,
            r,
            c_n,
            errors: pairs.iter().map(|p| p.0).collect(),
            delta_norms: pairs.iter().map(|p| p.1).collect(),
            holds,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub sigma: f64,
    pub samples: usize,
    pub delta_norm: f64,
    /// `||g(x) - g(x + delta)||` from the Monte-Carlo estimates.
    pub difference: f64,
    /// `M / (sqrt(2 pi) sigma) ||delta||`.
    pub bound: f64,
    /// Three standard errors of each estimate, summed.
    pub slack: f64,
    pub holds: bool,
}

/// Monte-Carlo check of the smoothed denoiser's Lipschitz bound. Both
/// estimates use the same noise draws.
pub fn lemma1_check(
    theta: &DenoiserNet,
    sigma: f64,
    x: &ComplexImage,
    delta: &ComplexImage,
    samples: usize,
    seed: u64,
) -> Result<Lemma1Report> {
    if x.shape() != delta.shape() {
        return Err(crate::error::validation("lemma1_check: x and delta differ in shape"));
    }
    if samples < 2 {
        return Err(config("lemma1_check needs at least two samples"));
    }
    let (h, w) = x.shape();
    let m = theta.bound_m(h, w);
    let bound = contraction_ratio(sigma, m, 1.0)? * delta.norm();
    let len = 2 * h * w;
    let xd = x.add(delta);
    let mut stats = [(vec![0.0; len], vec![0.0; len]), (vec![0.0; len], vec![0.0; len])];
    let mut rng = rng_for(seed, &[STREAM_LEMMA, 0]);
    let mut input = vec![0.0; len];
    for _ in 0..samples {
        let eta: Vec<f64> = (0..len)
            .map(|_| sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        for (k, base) in [x, &xd].into_iter().enumerate() {
            for ((v, b), e) in input.iter_mut().zip(base.as_slice()).zip(&eta) {
                *v = b + e;
            }
            let d = theta.apply_planes(&input, h, w);
            let (s, s2) = &mut stats[k];
            for (i, v) in d.into_iter().enumerate() {
                s[i] += v;
                s2[i] += v * v;
            }
        }
    }
    let t = samples as f64;
    let mut means = Vec::with_capacity(2);
    let mut slack = 0.0;
    for (s, s2) in &stats {
        let mean: Vec<f64> = s.iter().map(|v| v / t).collect();
        let var_sum: f64 = s2
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / t - m * m) * t / (t - 1.0)).max(0.0))
            .sum();
        slack += 3.0 * (var_sum / t).sqrt();
        means.push(mean);
    }
    let difference = means[0]
        .iter()
        .zip(&means[1])
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(Lemma1Report {
        sigma,
        samples,
        delta_norm: delta.norm(),
        difference,
        bound,
        slack,
        holds: difference <= bound + slack,
    })
}
