//! Unrolled reconstruction pipelines. Every pipeline is recorded on a tape so
//! the same code serves inference, training and white-box attacks; the
//! image-returning wrappers simply record on a throwaway tape with frozen
//! parameters.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CgRecord, Tape, Var};
use crate::error::{config, usage, Result};
use crate::fourier::{ComplexImage, ForwardOperator, KSpaceData, SamplingMask};
use crate::models::{image_tensor, tensor_image, DenoiserNet, IstaNetParams, WeightEncoder};
use crate::rng::{gaussian_vec, STREAM_KSPACE, STREAM_SMOOTH};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnrollConfig {
    pub n_steps: usize,
    pub lambda: f64,
    pub cg_tol: f64,
    pub cg_max: usize,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self {
            n_steps: 8,
            lambda: 1.0,
            cg_tol: 1e-6,
            cg_max: 50,
        }
    }
}

impl UnrollConfig {
    /// `n_steps = 0` is accepted and yields the trivial trace `[A^H y]`.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.cg_tol > 0.0) || self.cg_max == 0 {
            return Err(config(format!("invalid unroll config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    /// Noise standard deviation per real/imaginary channel.
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            samples: 10,
            seed: 0,
        }
    }
}

impl SmoothingConfig {
    pub fn none() -> Self {
        Self {
            sigma: 0.0,
            samples: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() || self.samples == 0 {
            return Err(config(format!("invalid smoothing config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IstaMode {
    Vanilla,
    Smug,
    Wsmug,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Modl,
    RsE2e,
    Smug,
    Wsmug,
    IstaNet(IstaMode),
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Modl,
        Method::RsE2e,
        Method::Smug,
        Method::Wsmug,
        Method::IstaNet(IstaMode::Vanilla),
        Method::IstaNet(IstaMode::Smug),
        Method::IstaNet(IstaMode::Wsmug),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Modl => "modl",
            Method::RsE2e => "rs-e2e",
            Method::Smug => "smug",
            Method::Wsmug => "wsmug",
            Method::IstaNet(IstaMode::Vanilla) => "istanet",
            Method::IstaNet(IstaMode::Smug) => "istanet-smug",
            Method::IstaNet(IstaMode::Wsmug) => "istanet-wsmug",
        }
    }

    pub fn uses_smoothing(&self) -> bool {
        !matches!(self, Method::Modl | Method::IstaNet(IstaMode::Vanilla))
    }

    pub fn uses_encoder(&self) -> bool {
        matches!(self, Method::Wsmug | Method::IstaNet(IstaMode::Wsmug))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| usage(format!("unknown method {s:?}")))
    }
}

/// The learned components a pipeline may draw on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Models {
    pub denoiser: Option<DenoiserNet>,
    pub encoder: Option<WeightEncoder>,
    pub ista: Option<IstaNetParams>,
}

/// Tape variables for each bound model, in parameter order.
#[derive(Clone, Debug, Default)]
pub struct BoundModels {
    pub denoiser: Vec<Var>,
    pub encoder: Vec<Var>,
    pub ista: Vec<Var>,
}

impl Models {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModels {
        BoundModels {
            denoiser: self
                .denoiser
                .as_ref()
                .map(|d| d.params().bind(tape, trainable))
                .unwrap_or_default(),
            encoder: self
                .encoder
                .as_ref()
                .map(|e| e.params().bind(tape, trainable))
                .unwrap_or_default(),
            ista: self
                .ista
                .as_ref()
                .map(|i| i.params().bind(tape, trainable))
                .unwrap_or_default(),
        }
    }

    fn denoiser(&self, m: Method) -> Result<&DenoiserNet> {
        self.denoiser
            .as_ref()
            .ok_or_else(|| usage(format!("{m} needs a denoiser")))
    }

    fn encoder(&self, m: Method) -> Result<&WeightEncoder> {
        self.encoder
            .as_ref()
            .ok_or_else(|| usage(format!("{m} needs a weighting encoder")))
    }

    fn ista(&self, m: Method) -> Result<&IstaNetParams> {
        self.ista
            .as_ref()
            .ok_or_else(|| usage(format!("{m} needs ISTA-Net parameters")))
    }
}

/// Image-domain smoothing noise for unrolling step `step`, sample `sample`.
pub fn smoothing_noise(sc: &SmoothingConfig, step: usize, sample: usize, h: usize, w: usize) -> Tensor {
    let data = gaussian_vec(
        sc.seed,
        &[STREAM_SMOOTH, step as u64, sample as u64],
        2 * h * w,
        sc.sigma,
    );
    Tensor::new(crate::tensor::Shape::new(2, h, w), data)
}

/// k-space noise for RS-E2E sample `sample`.
pub fn kspace_noise(sc: &SmoothingConfig, sample: usize, h: usize, w: usize) -> Tensor {
    let data = gaussian_vec(sc.seed, &[STREAM_KSPACE, sample as u64], 2 * h * w, sc.sigma);
    Tensor::new(crate::tensor::Shape::new(2, h, w), data)
}

/// Iterates recorded on a tape. For RS-E2E these are per-step sample means.
#[derive(Clone, Debug)]
pub struct TapeTrace {
    pub iterates: Vec<Var>,
    /// Denoiser-block output fed to each DC step (the smoothed one for
    /// smoothing pipelines).
    pub denoised: Vec<Var>,
}

impl TapeTrace {
    pub fn output(&self) -> Var {
        *self.iterates.last().expect("a trace always holds x0")
    }
}

/// Everything a pipeline needs besides the measurements.
pub struct Pipeline<'a> {
    pub method: Method,
    pub models: &'a Models,
    pub op: Arc<ForwardOperator>,
    pub unroll: &'a UnrollConfig,
    pub smoothing: &'a SmoothingConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        method: Method,
        models: &'a Models,
        op: &ForwardOperator,
        unroll: &'a UnrollConfig,
        smoothing: &'a SmoothingConfig,
    ) -> Self {
        Self {
            method,
            models,
            op: Arc::new(op.clone()),
            unroll,
            smoothing,
        }
    }

    /// Same pipeline under different smoothing settings.
    pub fn with_smoothing<'b>(&'b self, smoothing: &'b SmoothingConfig) -> Pipeline<'b> {
        Pipeline {
            method: self.method,
            models: self.models,
            op: self.op.clone(),
            unroll: self.unroll,
            smoothing,
        }
    }

    /// Same pipeline with different unrolling settings.
    pub fn with_unroll<'b>(&'b self, unroll: &'b UnrollConfig) -> Pipeline<'b> {
        Pipeline {
            method: self.method,
            models: self.models,
            op: self.op.clone(),
            unroll,
            smoothing: self.smoothing,
        }
    }

    fn mask(&self) -> Arc<SamplingMask> {
        Arc::new(self.op.mask().clone())
    }

    /// `A^H y` on the tape.
    pub fn adjoint(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let m = tape.mask_apply(y, self.mask())?;
        tape.idft2(m)
    }

    fn dc(&self, tape: &mut Tape, y: Var, z: Var) -> Result<Var> {
        let u = self.unroll;
        tape.dc_solve(self.op.clone(), y, z, u.lambda, u.cg_tol, u.cg_max)
    }

    /// `(1/T) sum_t D(x + eta_t)` or its encoder-weighted form.
    fn smoothed_block(
        &self,
        tape: &mut Tape,
        vars: &BoundModels,
        x: Var,
        step: usize,
        weighted: bool,
        block: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    ) -> Result<Var> {
        let sc = self.smoothing;
        let (h, w) = self.op.shape();
        let mut outs = Vec::with_capacity(sc.samples);
        let mut weights = Vec::new();
        for t in 0..sc.samples {
            let xin = if sc.sigma > 0.0 {
                let eta = tape.constant(smoothing_noise(sc, step, t, h, w));
                tape.add(x, eta)?
            } else {
                x
            };
            let d = block(tape, xin)?;
            if weighted {
                let enc = self.models.encoder(self.method)?;
                let wt = enc.forward_on_tape(tape, &vars.encoder, xin)?;
                outs.push(tape.mul_scalar(d, wt)?);
                weights.push(wt);
            } else {
                outs.push(d);
            }
        }
        let sum = tape.add_all(&outs)?;
        if weighted {
            let den = tape.add_all(&weights)?;
            let inv = tape.recip(den)?;
            tape.mul_scalar(sum, inv)
        } else {
            Ok(tape.scale(sum, 1.0 / sc.samples as f64))
        }
    }

    fn modl_chain(&self, tape: &mut Tape, vars: &BoundModels, y: Var) -> Result<TapeTrace> {
        let den = self.models.denoiser(self.method)?;
        let x0 = self.adjoint(tape, y)?;
        let mut trace = TapeTrace {
            iterates: vec![x0],
            denoised: Vec::new(),
        };
        let mut x = x0;
        for _ in 0..self.unroll.n_steps {
            let z = den.forward_on_tape(tape, &vars.denoiser, x)?;
            x = self.dc(tape, y, z)?;
            trace.denoised.push(z);
            trace.iterates.push(x);
        }
        Ok(trace)
    }

    /// Records the pipeline on `tape` for measurements `y` (a two-channel,
    /// zero-filled k-space variable).
    pub fn record(&self, tape: &mut Tape, vars: &BoundModels, y: Var) -> Result<TapeTrace> {
        self.unroll.validate()?;
        self.smoothing.validate()?;
        match self.method {
            Method::Modl => self.modl_chain(tape, vars, y),
            Method::Smug | Method::Wsmug => {
                let den = self.models.denoiser(self.method)?;
                let weighted = self.method == Method::Wsmug;
                let x0 = self.adjoint(tape, y)?;
                let mut trace = TapeTrace {
                    iterates: vec![x0],
                    denoised: Vec::new(),
                };
                let mut x = x0;
                for n in 0..self.unroll.n_steps {
                    let block = |tape: &mut Tape, v: Var| den.forward_on_tape(tape, &vars.denoiser, v);
                    let z = self.smoothed_block(tape, vars, x, n, weighted, &block)?;
                    x = self.dc(tape, y, z)?;
                    trace.denoised.push(z);
                    trace.iterates.push(x);
                }
                Ok(trace)
            }
            Method::RsE2e => {
                let sc = self.smoothing;
                let (h, w) = self.op.shape();
                let mut runs = Vec::with_capacity(sc.samples);
                for t in 0..sc.samples {
                    let yt = if sc.sigma > 0.0 {
                        let eta = tape.constant(kspace_noise(sc, t, h, w));
                        tape.add(y, eta)?
                    } else {
                        y
                    };
                    runs.push(self.modl_chain(tape, vars, yt)?);
                }
                let inv_t = 1.0 / sc.samples as f64;
                let mut mean = |pick: &dyn Fn(&TapeTrace) -> Vec<Var>| -> Result<Vec<Var>> {
                    let per_run: Vec<Vec<Var>> = runs.iter().map(pick).collect();
                    (0..per_run[0].len())
                        .map(|i| {
                            let col: Vec<Var> = per_run.iter().map(|r| r[i]).collect();
                            let s = tape.add_all(&col)?;
                            Ok(tape.scale(s, inv_t))
                        })
                        .collect()
                };
                let iterates = mean(&|r: &TapeTrace| r.iterates.clone())?;
                let denoised = mean(&|r: &TapeTrace| r.denoised.clone())?;
                Ok(TapeTrace { iterates, denoised })
            }
            Method::IstaNet(mode) => self.ista_chain(tape, vars, y, mode),
        }
    }

    fn ista_chain(&self, tape: &mut Tape, vars: &BoundModels, y: Var, mode: IstaMode) -> Result<TapeTrace> {
        let ista = self.models.ista(self.method)?;
        let phases = ista.config().phases;
        if self.unroll.n_steps > phases {
            return Err(usage(format!(
                "ISTA-Net has {phases} phases but {} steps were requested",
                self.unroll.n_steps
            )));
        }
        let mask = self.mask();
        let x0 = self.adjoint(tape, y)?;
        let mut trace = TapeTrace {
            iterates: vec![x0],
            denoised: Vec::new(),
        };
        let mut x = x0;
        for n in 0..self.unroll.n_steps {
            let pv = ista.phase_vars(&vars.ista, n);
            let fx = tape.dft2(x)?;
            let ax = tape.mask_apply(fx, mask.clone())?;
            let resid = tape.sub(ax, y)?;
            let g = self.adjoint(tape, resid)?;
            let step = tape.mul_scalar(g, pv[0])?;
            let r = tape.sub(x, step)?;
            let block = |tape: &mut Tape, v: Var| -> Result<Var> {
                let u = ista.analysis(tape, pv, v)?;
                let s = tape.soft_threshold(u, pv[1])?;
                ista.synthesis(tape, pv, s)
            };
            x = match mode {
                IstaMode::Vanilla => block(tape, r)?,
                IstaMode::Smug => self.smoothed_block(tape, vars, r, n, false, &block)?,
                IstaMode::Wsmug => self.smoothed_block(tape, vars, r, n, true, &block)?,
            };
            trace.denoised.push(r);
            trace.iterates.push(x);
        }
        Ok(trace)
    }

    /// Runs the pipeline with frozen parameters.
    pub fn run(&self, y: &KSpaceData) -> Result<ReconTrace> {
        let mut tape = Tape::new();
        let vars = self.models.bind(&mut tape, false);
        let yv = tape.constant(image_tensor(y));
        let trace = self.record(&mut tape, &vars, yv)?;
        Ok(ReconTrace::from_tape(&tape, &trace))
    }
}

/// Materialized iterates of one reconstruction.
#[derive(Clone, Debug)]
pub struct ReconTrace {
    pub iterates: Vec<ComplexImage>,
    pub denoised: Vec<ComplexImage>,
    pub cg: Vec<CgRecord>,
}

/// One CSV row per iterate.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub iterate_norm: f64,
    pub step_change: f64,
    pub cg_iterations: Option<usize>,
    pub cg_rel_residual: Option<f64>,
    pub cg_converged: Option<bool>,
}

impl ReconTrace {
    pub fn from_tape(tape: &Tape, trace: &TapeTrace) -> Self {
        Self {
            iterates: trace.iterates.iter().map(|v| tensor_image(tape.value(*v))).collect(),
            denoised: trace.denoised.iter().map(|v| tensor_image(tape.value(*v))).collect(),
            cg: tape.cg_log().to_vec(),
        }
    }

    pub fn output(&self) -> &ComplexImage {
        self.iterates.last().expect("a trace always holds x0")
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    /// Whether every CG solve met its tolerance.
    pub fn cg_converged(&self) -> bool {
        self.cg.iter().all(|c| c.converged)
    }

    /// Per-iterate rows; CG columns are filled when the pipeline made exactly
    /// one solve per step.
    pub fn rows(&self) -> Vec<TraceRow> {
        let one_per_step = self.cg.len() + 1 == self.iterates.len();
        self.iterates
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let cg = if one_per_step && i > 0 {
                    Some(self.cg[i - 1])
                } else {
                    None
                };
                TraceRow {
                    step: i,
                    iterate_norm: x.norm(),
                    step_change: if i == 0 { 0.0 } else { x.distance(&self.iterates[i - 1]) },
                    cg_iterations: cg.map(|c| c.iterations),
                    cg_rel_residual: cg.map(|c| c.rel_residual),
                    cg_converged: cg.map(|c| c.converged),
                }
            })
            .collect()
    }
}

/// Outcome of one data-consistency solve.
#[derive(Clone, Debug)]
pub struct DcOutcome {
    pub x: ComplexImage,
    pub cg: CgRecord,
}

/// `(A^H A + lambda I)^{-1}(A^H y + lambda z)`.
pub fn dc_step(op: &ForwardOperator, y: &KSpaceData, z: &ComplexImage, cfg: &UnrollConfig) -> Result<DcOutcome> {
    cfg.validate()?;
    let mut rhs = op.apply_adjoint(y)?.into_vec();
    if z.shape() != op.shape() {
        return Err(crate::error::validation("dc_step: z shape does not match the operator"));
    }
    for (r, v) in rhs.iter_mut().zip(z.as_slice()) {
        *r += cfg.lambda * v;
    }
    let out = op.solve_regularized(&rhs, cfg.lambda, cfg.cg_tol, cfg.cg_max);
    let (h, w) = op.shape();
    Ok(DcOutcome {
        x: ComplexImage::from_vec(h, w, out.x)?,
        cg: CgRecord {
            iterations: out.iterations,
            rel_residual: out.rel_residual,
            converged: out.converged,
            backward: false,
        },
    })
}

fn single_model(denoiser: &DenoiserNet) -> Models {
    Models {
        denoiser: Some(denoiser.clone()),
        ..Default::default()
    }
}

pub fn modl_reconstruct(
    theta: &DenoiserNet,
    op: &ForwardOperator,
    y: &KSpaceData,
    cfg: &UnrollConfig,
) -> Result<ReconTrace> {
    let models = single_model(theta);
    let sc = SmoothingConfig::none();
    Pipeline::new(Method::Modl, &models, op, cfg, &sc).run(y)
}

pub fn smug_reconstruct(
    theta: &DenoiserNet,
    op: &ForwardOperator,
    y: &KSpaceData,
    cfg: &UnrollConfig,
    sc: &SmoothingConfig,
) -> Result<ReconTrace> {
    let models = single_model(theta);
    Pipeline::new(Method::Smug, &models, op, cfg, sc).run(y)
}

pub fn wsmug_reconstruct(
    theta: &DenoiserNet,
    phi: &WeightEncoder,
    op: &ForwardOperator,
    y: &KSpaceData,
    cfg: &UnrollConfig,
    sc: &SmoothingConfig,
) -> Result<ReconTrace> {
    let models = Models {
        denoiser: Some(theta.clone()),
        encoder: Some(phi.clone()),
        ista: None,
    };
    Pipeline::new(Method::Wsmug, &models, op, cfg, sc).run(y)
}

/// `E_eta[F_MoDL(A^H(y + eta))]` with k-space noise reused in every DC step.
pub fn rs_e2e_reconstruct(
    theta: &DenoiserNet,
    op: &ForwardOperator,
    y: &KSpaceData,
    cfg: &UnrollConfig,
    sc: &SmoothingConfig,
) -> Result<ComplexImage> {
    let models = single_model(theta);
    Ok(Pipeline::new(Method::RsE2e, &models, op, cfg, sc)
        .run(y)?
        .output()
        .clone())
}

pub fn istanet_reconstruct(
    params: &IstaNetParams,
    encoder: Option<&WeightEncoder>,
    op: &ForwardOperator,
    y: &KSpaceData,
    cfg: &UnrollConfig,
    sc: &SmoothingConfig,
    mode: IstaMode,
) -> Result<ReconTrace> {
    let models = Models {
        denoiser: None,
        encoder: encoder.cloned(),
        ista: Some(params.clone()),
    };
    Pipeline::new(Method::IstaNet(mode), &models, op, cfg, sc).run(y)
}

fn smooth_on_tape(
    theta: &DenoiserNet,
    phi: Option<&WeightEncoder>,
    x: &ComplexImage,
    sc: &SmoothingConfig,
) -> Result<ComplexImage> {
    sc.validate()?;
    let models = Models {
        denoiser: Some(theta.clone()),
        encoder: phi.cloned(),
        ista: None,
    };
    let method = if phi.is_some() { Method::Wsmug } else { Method::Smug };
    let unroll = UnrollConfig::default();
    let (h, w) = x.shape();
    let op = ForwardOperator::new(SamplingMask::full(h, w)?);
    let pipe = Pipeline::new(method, &models, &op, &unroll, sc);
    let mut tape = Tape::new();
    let vars = models.bind(&mut tape, false);
    let xv = tape.constant(image_tensor(x));
    let block = |tape: &mut Tape, v: Var| theta.forward_on_tape(tape, &vars.denoiser, v);
    let z = pipe.smoothed_block(&mut tape, &vars, xv, 0, phi.is_some(), &block)?;
    Ok(tensor_image(tape.value(z)))
}

/// `(1/T) sum_t D(x + eta_t)`, with the noise of unrolling step 0.
pub fn smooth_denoise(theta: &DenoiserNet, x: &ComplexImage, sc: &SmoothingConfig) -> Result<ComplexImage> {
    smooth_on_tape(theta, None, x, sc)
}

/// `sum_t E(x + eta_t) D(x + eta_t) / sum_t E(x + eta_t)`, same noise as
/// [`smooth_denoise`].
pub fn weighted_smooth(
    theta: &DenoiserNet,
    phi: &WeightEncoder,
    x: &ComplexImage,
    sc: &SmoothingConfig,
) -> Result<ComplexImage> {
    smooth_on_tape(theta, Some(phi), x, sc)
}
