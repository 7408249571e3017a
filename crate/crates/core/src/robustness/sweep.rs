//! Evaluation over a test set and one-dimensional sweeps of the evaluation
//! context.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{gaussian_perturb, operator_constants, pgd_attack, theorem1_bound, AttackConfig};
use crate::error::{config, usage, Result};
use crate::fourier::{ComplexImage, ForwardOperator, KSpaceData, MaskSpec};
use crate::metrics::{psnr, ssim};
use crate::reconstructors::{Method, Models, Pipeline, SmoothingConfig, UnrollConfig};
use crate::rng::derive_seed;

const STREAM_EVAL_NOISE: u64 = 0x4e4f;
const STREAM_EVAL_SMOOTH: u64 = 0x4553;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Epsilon,
    Sigma,
    Accel,
    UnrollSteps,
    McSamples,
}

impl SweepKind {
    pub const ALL: [SweepKind; 5] = [
        SweepKind::Epsilon,
        SweepKind::Sigma,
        SweepKind::Accel,
        SweepKind::UnrollSteps,
        SweepKind::McSamples,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::Epsilon => "epsilon",
            SweepKind::Sigma => "sigma",
            SweepKind::Accel => "accel",
            SweepKind::UnrollSteps => "unroll_steps",
            SweepKind::McSamples => "mc_samples",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| usage(format!("unknown sweep kind {s:?}")))
    }
}

/// Fixed context of an evaluation; a sweep varies one field at a time.
#[derive(Clone, Debug)]
pub struct EvalSetup {
    pub targets: Vec<ComplexImage>,
    pub mask: MaskSpec,
    pub unroll: UnrollConfig,
    pub smoothing: SmoothingConfig,
    pub attack: AttackConfig,
    /// Standard deviation of the random measurement noise in the noisy
    /// evaluation.
    pub noise_sigma: f64,
    /// Fill `wall_seconds`; off by default so repeated runs are identical.
    pub timing: bool,
}

/// Test-set means for one method at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub method: String,
    pub kind: String,
    pub grid_value: f64,
    pub clean_psnr: f64,
    pub clean_ssim: f64,
    pub noise_psnr: f64,
    pub noise_ssim: f64,
    pub robust_psnr: f64,
    pub robust_ssim: f64,
    pub rob_error_mean: f64,
    /// `C_N` at the evaluated depth, for the smoothed-unrolling pipeline.
    pub bound_cn: Option<f64>,
    pub holds: Option<bool>,
    pub wall_seconds: Option<f64>,
}

/// Outcome of [`evaluate`]: the row plus the attack perturbations used.
pub struct Evaluation {
    pub row: MetricsRow,
    pub deltas: Vec<KSpaceData>,
    pub errors: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Clean, noisy and worst-case metrics for `method` over `setup.targets`.
/// Pass `fixed_deltas` to reuse perturbations instead of attacking.
pub fn evaluate(
    method: Method,
    models: &Models,
    setup: &EvalSetup,
    kind: &str,
    grid_value: f64,
    fixed_deltas: Option<&[KSpaceData]>,
) -> Result<Evaluation> {
    if setup.targets.is_empty() {
        return Err(config("evaluation needs at least one test image"));
    }
    if fixed_deltas.is_some_and(|d| d.len() != setup.targets.len()) {
        return Err(usage("one fixed perturbation per test image is required"));
    }
    let started = Instant::now();
    let op = ForwardOperator::new(setup.mask.build()?);
    let mut cols: [Vec<f64>; 6] = Default::default();
    let (mut deltas, mut errors, mut delta_norms) = (Vec::new(), Vec::new(), Vec::new());
    for (i, t) in setup.targets.iter().enumerate() {
        let sc = SmoothingConfig {
            seed: derive_seed(setup.smoothing.seed, &[STREAM_EVAL_SMOOTH, i as u64]),
            ..setup.smoothing.clone()
        };
        let pipe = Pipeline::new(method, models, &op, &setup.unroll, &sc);
        let y = op.apply_forward(t)?;
        let clean = pipe.run(&y)?;
        let noisy_y = gaussian_perturb(&y, setup.noise_sigma, derive_seed(sc.seed, &[STREAM_EVAL_NOISE]))?;
        let noisy = pipe.run(&noisy_y)?;
        let delta = match fixed_deltas {
            Some(d) => d[i].clone(),
            None => {
                let ac = AttackConfig {
                    seed: derive_seed(setup.attack.seed, &[i as u64]),
                    ..setup.attack.clone()
                };
                pgd_attack(&pipe, &y, t, &ac)?.delta
            }
        };
        let attacked = pipe.run(&y.add(&delta))?;
        for (k, x) in [clean.output(), noisy.output(), attacked.output()]
            .into_iter()
            .enumerate()
        {
            cols[2 * k].push(psnr(x, t)?);
            cols[2 * k + 1].push(ssim(x, t)?);
        }
        errors.push(clean.output().distance(attacked.output()));
        delta_norms.push(delta.norm());
        deltas.push(delta);
    }
    let (bound_cn, holds) = if method == Method::Smug && setup.smoothing.sigma > 0.0 {
        let den = models.denoiser.as_ref().ok_or_else(|| usage("smug needs a denoiser"))?;
        let (opnorm, alpha) = operator_constants(&op, setup.unroll.lambda, 0)?;
        let m = den.bound_m(setup.mask.height, setup.mask.width);
        let c = theorem1_bound(setup.unroll.n_steps as u64, setup.smoothing.sigma, m, alpha, opnorm)?;
        (Some(c), Some(errors.iter().zip(&delta_norms).all(|(e, d)| *e <= c * d)))
    } else {
        (None, None)
    };
    let row = MetricsRow {
        method: method.name().to_string(),
        kind: kind.to_string(),
        grid_value,
        clean_psnr: mean(&cols[0]),
        clean_ssim: mean(&cols[1]),
        noise_psnr: mean(&cols[2]),
        noise_ssim: mean(&cols[3]),
        robust_psnr: mean(&cols[4]),
        robust_ssim: mean(&cols[5]),
        rob_error_mean: mean(&errors),
        bound_cn,
        holds,
        wall_seconds: setup.timing.then(|| started.elapsed().as_secs_f64()),
    };
    Ok(Evaluation { row, deltas, errors })
}

fn apply_grid(setup: &EvalSetup, kind: SweepKind, g: f64) -> Result<EvalSetup> {
    let mut s = setup.clone();
    let count = |g: f64| -> Result<usize> {
        if g >= 0.0 && g.fract() == 0.0 {
            Ok(g as usize)
        } else {
            Err(config(format!("{kind} grid values must be whole numbers, got {g}")))
        }
    };
    match kind {
        SweepKind::Epsilon => s.attack.epsilon_scale = g,
        SweepKind::Sigma => s.smoothing.sigma = g,
        SweepKind::Accel => s.mask.accel = g,
        SweepKind::UnrollSteps => s.unroll.n_steps = count(g)?,
        SweepKind::McSamples => s.smoothing.samples = count(g)?,
    }
    Ok(s)
}

/// Evaluates every method at every grid point. The sigma sweep attacks once
/// at the first grid point and reuses those perturbations across the grid.
pub fn sweep(
    kind: SweepKind,
    grid: &[f64],
    methods: &[(Method, Models)],
    setup: &EvalSetup,
) -> Result<Vec<MetricsRow>> {
    if grid.is_empty() {
        return Err(config("sweep grid is empty"));
    }
    if methods.is_empty() {
        return Err(config("sweep needs at least one trained method"));
    }
    let mut rows = Vec::with_capacity(grid.len() * methods.len());
    for (method, models) in methods {
        let mut fixed: Option<Vec<KSpaceData>> = None;
        for &g in grid {
            let s = apply_grid(setup, kind, g)?;
            let ev = evaluate(*method, models, &s, kind.name(), g, fixed.as_deref())?;
            if kind == SweepKind::Sigma && fixed.is_none() {
                fixed = Some(ev.deltas);
            }
            rows.push(ev.row);
        }
    }
    Ok(rows)
}
