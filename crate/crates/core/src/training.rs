//! Losses, the Adam optimizer and the epoch loop for pre-training and
//! fine-tuning.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{config, usage, Result};
use crate::fourier::{ComplexImage, ForwardOperator, KSpaceData};
use crate::models::{image_tensor, DenoiserNet, Params};
use crate::reconstructors::{
    smoothing_noise, BoundModels, IstaMode, Method, Models, Pipeline, SmoothingConfig, UnrollConfig,
};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

const STREAM_SHUFFLE: u64 = 0x5348;
const STREAM_BATCH: u64 = 0x4241;
const STREAM_USTAB: u64 = 0x5553;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UstabVariant {
    /// `D(x^n + eta)` against `D(t)`.
    DenoisedTarget,
    /// `D(x^n + eta)` against `D(x^n)`.
    DenoisedIterate,
    /// `D(x^n + eta)` against `t`.
    RawTarget,
    /// Both branches through a frozen copy of the vanilla denoiser.
    FrozenDenoiser,
}

impl UstabVariant {
    pub const ALL: [UstabVariant; 4] = [
        UstabVariant::DenoisedTarget,
        UstabVariant::DenoisedIterate,
        UstabVariant::RawTarget,
        UstabVariant::FrozenDenoiser,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            UstabVariant::DenoisedTarget => "denoised_target",
            UstabVariant::DenoisedIterate => "denoised_iterate",
            UstabVariant::RawTarget => "raw_target",
            UstabVariant::FrozenDenoiser => "frozen_denoiser",
        }
    }
}

impl fmt::Display for UstabVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UstabVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| usage(format!("unknown UStab variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub lambda_ell: f64,
    /// Noise level for the pre-training loss and for training-time smoothing.
    pub sigma: f64,
    /// Monte-Carlo draws per expectation while training.
    pub samples: usize,
    pub seed: u64,
    pub ustab_variant: UstabVariant,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Weight of the ISTA-Net transform-inversion penalty.
    pub ista_constraint_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1,
            lr: 1e-4,
            adam_betas: (0.5, 0.999),
            adam_eps: 1e-8,
            lambda_ell: 1.0,
            sigma: 0.01,
            samples: 2,
            seed: 0,
            ustab_variant: UstabVariant::DenoisedTarget,
            clip_norm: 10.0,
            ista_constraint_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.adam_betas;
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.adam_eps > 0.0
            && self.lambda_ell > 0.0
            && self.sigma >= 0.0
            && self.samples >= 1
            && self.batch_size >= 1
            && self.clip_norm >= 0.0
            && self.ista_constraint_weight >= 0.0;
        if !ok {
            return Err(config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    /// Training-time smoothing with the given noise seed.
    pub fn smoothing(&self, seed: u64) -> SmoothingConfig {
        SmoothingConfig {
            sigma: self.sigma,
            samples: self.samples,
            seed,
        }
    }
}

/// Terms of one loss evaluation. `total = ustab + lambda_ell * recon` for
/// every fine-tuning objective; pre-training reports its denoising loss as
/// both `total` and `recon`. For ISTA-Net the `ustab` slot carries the
/// weighted transform-inversion penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub recon: f64,
    pub ustab: f64,
}

impl LossReport {
    fn add_scaled(&mut self, o: &LossReport, s: f64) {
        self.total += s * o.total;
        self.recon += s * o.recon;
        self.ustab += s * o.ustab;
    }
}

/// What is being optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Denoising loss on noisy targets; trains the denoiser alone.
    Pretrain,
    /// End-to-end reconstruction loss of a pipeline, plus the UStab term for
    /// the smoothed-unrolling pipelines.
    Finetune(Method),
}

impl Objective {
    fn method(&self) -> Option<Method> {
        match self {
            Objective::Pretrain => None,
            Objective::Finetune(m) => Some(*m),
        }
    }

    fn uses_ustab(&self) -> bool {
        matches!(self, Objective::Finetune(Method::Smug | Method::Wsmug))
    }
}

/// One training pair: ground truth and its simulated measurements.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub target: ComplexImage,
    pub measurements: KSpaceData,
}

/// Loss graph for one item.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub ustab: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            total: tape.scalar(self.total),
            recon: tape.scalar(self.recon),
            ustab: tape.scalar(self.ustab),
        }
    }
}

fn sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    Ok(tape.sum_squares(d))
}

/// `(1/T) sum_t ||D(t + eta_t) - t||^2`, recorded on `tape`.
pub fn pretrain_loss_on_tape(
    tape: &mut Tape,
    den: &DenoiserNet,
    vars: &[Var],
    t: Var,
    sc: &SmoothingConfig,
) -> Result<Var> {
    sc.validate()?;
    let s = t.shape();
    let mut terms = Vec::with_capacity(sc.samples);
    for k in 0..sc.samples {
        let input = if sc.sigma > 0.0 {
            let eta = tape.constant(smoothing_noise(sc, 0, k, s.h, s.w));
            tape.add(t, eta)?
        } else {
            t
        };
        let d = den.forward_on_tape(tape, vars, input)?;
        terms.push(sq_dist(tape, d, t)?);
    }
    let sum = tape.add_all(&terms)?;
    Ok(tape.scale(sum, 1.0 / sc.samples as f64))
}

pub fn pretrain_loss(theta: &DenoiserNet, t: &ComplexImage, sc: &SmoothingConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = theta.params().bind(&mut tape, false);
    let tv = tape.constant(image_tensor(t));
    let l = pretrain_loss_on_tape(&mut tape, theta, &vars, tv, sc)?;
    Ok(tape.scalar(l))
}

/// A frozen denoiser bound as constants, used by the `frozen_denoiser` arm.
pub struct FrozenDenoiser<'a> {
    pub net: &'a DenoiserNet,
    pub vars: Vec<Var>,
}

impl<'a> FrozenDenoiser<'a> {
    pub fn bind(net: &'a DenoiserNet, tape: &mut Tape) -> Self {
        let vars = net.params().bind(tape, false);
        Self { net, vars }
    }
}

/// `sum_{n<N} E_eta ||D(x^n + eta) - target_n||^2` over the first `N`
/// iterates (`iterates` holds `x^0..x^N`).
#[allow(clippy::too_many_arguments)]
pub fn ustab_on_tape(
    tape: &mut Tape,
    den: &DenoiserNet,
    vars: &[Var],
    iterates: &[Var],
    t: Var,
    sc: &SmoothingConfig,
    variant: UstabVariant,
    frozen: Option<&FrozenDenoiser>,
) -> Result<Var> {
    sc.validate()?;
    if iterates.len() < 2 {
        return Err(usage("UStab needs a trace with at least one unrolling step"));
    }
    let (net, nv): (&DenoiserNet, &[Var]) = match (variant, frozen) {
        (UstabVariant::FrozenDenoiser, Some(f)) => (f.net, &f.vars),
        (UstabVariant::FrozenDenoiser, None) => {
            return Err(usage("the frozen_denoiser variant needs the frozen vanilla weights"))
        }
        _ => (den, vars),
    };
    let s = t.shape();
    let fixed_target = match variant {
        UstabVariant::DenoisedTarget | UstabVariant::FrozenDenoiser => Some(net.forward_on_tape(tape, nv, t)?),
        UstabVariant::RawTarget => Some(t),
        UstabVariant::DenoisedIterate => None,
    };
    let mut terms = Vec::new();
    for (n, &x) in iterates[..iterates.len() - 1].iter().enumerate() {
        let target = match fixed_target {
            Some(v) => v,
            None => net.forward_on_tape(tape, nv, x)?,
        };
        let mut inner = Vec::with_capacity(sc.samples);
        for k in 0..sc.samples {
            let input = if sc.sigma > 0.0 {
                let eta = tape.constant(smoothing_noise(sc, n, k, s.h, s.w));
                tape.add(x, eta)?
            } else {
                x
            };
            let d = net.forward_on_tape(tape, nv, input)?;
            inner.push(sq_dist(tape, d, target)?);
        }
        let sum = tape.add_all(&inner)?;
        terms.push(tape.scale(sum, 1.0 / sc.samples as f64));
    }
    tape.add_all(&terms)
}

/// Records the full loss of one item. `sc.seed` fixes every noise draw: the
/// pipeline uses it directly and the UStab expectation a derived stream.
#[allow(clippy::too_many_arguments)]
pub fn item_loss_on_tape(
    tape: &mut Tape,
    objective: Objective,
    models: &Models,
    vars: &BoundModels,
    frozen: Option<&FrozenDenoiser>,
    op: &ForwardOperator,
    item: &TrainItem,
    unroll: &UnrollConfig,
    sc: &SmoothingConfig,
    tc: &TrainConfig,
) -> Result<LossVars> {
    let t = tape.constant(image_tensor(&item.target));
    let Some(method) = objective.method() else {
        let den = models
            .denoiser
            .as_ref()
            .ok_or_else(|| usage("pre-training needs a denoiser"))?;
        let l = pretrain_loss_on_tape(tape, den, &vars.denoiser, t, sc)?;
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(LossVars {
            total: l,
            recon: l,
            ustab: zero,
        });
    };
    let y = tape.constant(image_tensor(&item.measurements));
    let pipe = Pipeline::new(method, models, op, unroll, sc);
    let trace = pipe.record(tape, vars, y)?;
    let recon = sq_dist(tape, trace.output(), t)?;
    let ustab = if objective.uses_ustab() {
        let den = models
            .denoiser
            .as_ref()
            .ok_or_else(|| usage("UStab needs a denoiser"))?;
        let usc = SmoothingConfig {
            seed: derive_seed(sc.seed, &[STREAM_USTAB]),
            ..sc.clone()
        };
        ustab_on_tape(
            tape,
            den,
            &vars.denoiser,
            &trace.iterates,
            t,
            &usc,
            tc.ustab_variant,
            frozen,
        )?
    } else if let Method::IstaNet(_) = method {
        let ista = models
            .ista
            .as_ref()
            .ok_or_else(|| usage("ISTA-Net parameters missing"))?;
        let mut terms = Vec::new();
        for (n, &r) in trace.denoised.iter().enumerate() {
            let pv = ista.phase_vars(&vars.ista, n);
            let u = ista.analysis(tape, pv, r)?;
            let back = ista.synthesis(tape, pv, u)?;
            terms.push(sq_dist(tape, back, r)?);
        }
        let sum = tape.add_all(&terms)?;
        tape.scale(sum, tc.ista_constraint_weight)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let weighted = tape.scale(recon, tc.lambda_ell);
    let total = tape.add(ustab, weighted)?;
    Ok(LossVars { total, recon, ustab })
}

/// `ell_UStab + lambda_ell ||F_SMUG(A^H y) - t||^2` with frozen parameters.
pub fn finetune_loss(
    theta: &DenoiserNet,
    op: &ForwardOperator,
    item: &TrainItem,
    unroll: &UnrollConfig,
    sc: &SmoothingConfig,
    tc: &TrainConfig,
) -> Result<LossReport> {
    let models = Models {
        denoiser: Some(theta.clone()),
        ..Default::default()
    };
    eval_loss(
        Objective::Finetune(Method::Smug),
        &models,
        None,
        op,
        item,
        unroll,
        sc,
        tc,
    )
}

/// The weighted fine-tuning objective with frozen parameters.
pub fn wfinetune_loss(
    models: &Models,
    op: &ForwardOperator,
    item: &TrainItem,
    unroll: &UnrollConfig,
    sc: &SmoothingConfig,
    tc: &TrainConfig,
) -> Result<LossReport> {
    eval_loss(
        Objective::Finetune(Method::Wsmug),
        models,
        None,
        op,
        item,
        unroll,
        sc,
        tc,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn eval_loss(
    objective: Objective,
    models: &Models,
    frozen: Option<&DenoiserNet>,
    op: &ForwardOperator,
    item: &TrainItem,
    unroll: &UnrollConfig,
    sc: &SmoothingConfig,
    tc: &TrainConfig,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let vars = models.bind(&mut tape, false);
    let fz = frozen.map(|f| FrozenDenoiser::bind(f, &mut tape));
    let l = item_loss_on_tape(
        &mut tape,
        objective,
        models,
        &vars,
        fz.as_ref(),
        op,
        item,
        unroll,
        sc,
        tc,
    )?;
    Ok(l.report(&tape))
}

/// Which parameter groups an objective updates.
fn trainable_groups(objective: Objective) -> [bool; 3] {
    match objective {
        Objective::Pretrain => [true, false, false],
        Objective::Finetune(Method::Wsmug) => [true, true, false],
        Objective::Finetune(Method::IstaNet(IstaMode::Wsmug)) => [false, true, true],
        Objective::Finetune(Method::IstaNet(_)) => [false, false, true],
        Objective::Finetune(_) => [true, false, false],
    }
}

fn groups_mut(models: &mut Models) -> [Option<&mut Params>; 3] {
    [
        models.denoiser.as_mut().map(|d| d.params_mut()),
        models.encoder.as_mut().map(|e| e.params_mut()),
        models.ista.as_mut().map(|i| i.params_mut()),
    ]
}

fn bound_groups(vars: &BoundModels) -> [&[Var]; 3] {
    [&vars.denoiser, &vars.encoder, &vars.ista]
}

/// Loss and parameter gradients for one item, trainable groups only, in
/// group-then-parameter order.
#[allow(clippy::too_many_arguments)]
pub fn item_gradients(
    objective: Objective,
    models: &Models,
    frozen: Option<&DenoiserNet>,
    op: &ForwardOperator,
    item: &TrainItem,
    unroll: &UnrollConfig,
    sc: &SmoothingConfig,
    tc: &TrainConfig,
) -> Result<(LossReport, Vec<Tensor>)> {
    let groups = trainable_groups(objective);
    let mut tape = Tape::new();
    let mut vars = BoundModels::default();
    let binds = [
        models.denoiser.as_ref().map(|d| d.params()),
        models.encoder.as_ref().map(|e| e.params()),
        models.ista.as_ref().map(|i| i.params()),
    ];
    for (g, p) in binds.iter().enumerate() {
        let Some(p) = p else { continue };
        let v = p.bind(&mut tape, groups[g]);
        match g {
            0 => vars.denoiser = v,
            1 => vars.encoder = v,
            _ => vars.ista = v,
        }
    }
    let fz = frozen.map(|f| FrozenDenoiser::bind(f, &mut tape));
    let l = item_loss_on_tape(
        &mut tape,
        objective,
        models,
        &vars,
        fz.as_ref(),
        op,
        item,
        unroll,
        sc,
        tc,
    )?;
    let grads: Gradients = tape.backward(l.total)?;
    let mut out = Vec::new();
    for (g, v) in bound_groups(&vars).iter().enumerate() {
        if groups[g] {
            out.extend(v.iter().map(|x| grads.wrt(*x)));
        }
    }
    Ok((l.report(&tape), out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], grads: &[Tensor], tc: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(usage("adam_step: parameter, gradient and state counts differ"));
    }
    if params
        .iter()
        .zip(grads)
        .zip(&state.m)
        .any(|((p, g), m)| p.shape() != g.shape() || p.shape() != m.shape())
    {
        return Err(usage("adam_step: shape mismatch"));
    }
    state.step += 1;
    let (b1, b2) = tc.adam_betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pj -= tc.lr * (mj / c1) / ((vj / c2).sqrt() + tc.adam_eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place to global norm `max_norm`; returns the norm
/// before clipping and whether clipping fired.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, bool) {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
        (norm, true)
    } else {
        (norm, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean item losses over the epoch.
    pub loss: LossReport,
    pub steps: usize,
    pub clipped_steps: usize,
    pub wall_seconds: f64,
}

/// Trains the groups of `models` selected by `objective` for `tc.epochs`
/// epochs. `on_epoch` sees every finished epoch (for CSV rows and
/// checkpoints); returning an error aborts training.
#[allow(clippy::too_many_arguments)]
pub fn train(
    objective: Objective,
    models: &mut Models,
    frozen: Option<&DenoiserNet>,
    dataset: &[TrainItem],
    op: &ForwardOperator,
    unroll: &UnrollConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Models) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    tc.validate()?;
    if dataset.is_empty() {
        return Err(config("training dataset is empty"));
    }
    if tc.ustab_variant == UstabVariant::FrozenDenoiser && objective.uses_ustab() && frozen.is_none() {
        return Err(config("the frozen_denoiser variant needs frozen vanilla weights"));
    }
    let groups = trainable_groups(objective);
    {
        let present = [
            models.denoiser.is_some(),
            models.encoder.is_some(),
            models.ista.is_some(),
        ];
        if groups.iter().zip(present).any(|(need, has)| *need && !has) {
            return Err(config("a model required by this objective is missing"));
        }
    }
    let mut adam = {
        let mut ps: Vec<&Tensor> = Vec::new();
        let g = [
            models.denoiser.as_ref().map(|d| d.params()),
            models.encoder.as_ref().map(|e| e.params()),
            models.ista.as_ref().map(|i| i.params()),
        ];
        for (i, p) in g.iter().enumerate() {
            if groups[i] {
                ps.extend(p.expect("checked above").tensors());
            }
        }
        AdamState::new(&ps)
    };
    let op = Arc::new(op.clone());
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let started = std::time::Instant::now();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_for(tc.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut acc = LossReport::default();
        let (mut steps, mut clipped) = (0, 0);
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let batch_seed = derive_seed(tc.seed, &[STREAM_BATCH, epoch as u64, b as u64]);
            let mut sum: Option<Vec<Tensor>> = None;
            let inv = 1.0 / batch.len() as f64;
            for (k, &idx) in batch.iter().enumerate() {
                let sc = tc.smoothing(derive_seed(batch_seed, &[k as u64]));
                let (rep, grads) = item_gradients(objective, models, frozen, &op, &dataset[idx], unroll, &sc, tc)?;
                acc.add_scaled(&rep, 1.0 / dataset.len() as f64);
                match sum.as_mut() {
                    None => {
                        let mut g = grads;
                        g.iter_mut().for_each(|t| t.scale_in_place(inv));
                        sum = Some(g);
                    }
                    Some(s) => {
                        for (a, mut g) in s.iter_mut().zip(grads) {
                            g.scale_in_place(inv);
                            a.add_assign(&g);
                        }
                    }
                }
            }
            let mut grads = sum.expect("batches are nonempty");
            if clip_global_norm(&mut grads, tc.clip_norm).1 {
                clipped += 1;
            }
            let mut ps: Vec<&mut Tensor> = Vec::new();
            for (i, g) in groups_mut(models).into_iter().enumerate() {
                if groups[i] {
                    ps.extend(g.expect("checked above").tensors_mut().iter_mut());
                }
            }
            adam_step(&mut adam, &mut ps, &grads, tc)?;
            steps += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: acc,
            steps,
            clipped_steps: clipped,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec, models)?;
        history.push(rec);
    }
    Ok(history)
}

/// Pre-trains a denoiser on the targets of `dataset`.
pub fn pretrain(
    init: DenoiserNet,
    dataset: &[TrainItem],
    op: &ForwardOperator,
    tc: &TrainConfig,
) -> Result<(DenoiserNet, Vec<EpochRecord>)> {
    let mut models = Models {
        denoiser: Some(init),
        ..Default::default()
    };
    let hist = train(
        Objective::Pretrain,
        &mut models,
        None,
        dataset,
        op,
        &UnrollConfig::default(),
        tc,
        |_, _| Ok(()),
    )?;
    Ok((models.denoiser.expect("kept"), hist))
}

/// Fine-tunes `models` (initialized from a pre-trained denoiser) under
/// `method`'s end-to-end objective.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    method: Method,
    mut models: Models,
    frozen: Option<&DenoiserNet>,
    dataset: &[TrainItem],
    op: &ForwardOperator,
    unroll: &UnrollConfig,
    tc: &TrainConfig,
) -> Result<(Models, Vec<EpochRecord>)> {
    if !matches!(method, Method::IstaNet(_)) && models.denoiser.is_none() {
        return Err(config("fine-tuning needs a pre-trained denoiser"));
    }
    let hist = train(
        Objective::Finetune(method),
        &mut models,
        frozen,
        dataset,
        op,
        unroll,
        tc,
        |_, _| Ok(()),
    )?;
    Ok((models, hist))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr() {
        let tc = TrainConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut st, &mut [&mut p], &[Tensor::scalar(1.0)], &tc).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_recurrence_by_hand() {
        let tc = TrainConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut st, &mut [&mut p], &[Tensor::scalar(1.0)], &tc).unwrap();
        let first = -p.item();
        adam_step(&mut st, &mut [&mut p], &[Tensor::scalar(1.0)], &tc).unwrap();
        let second = -p.item() - first;
        // m = 0.5 + 0.5*0.5 = 0.75, mhat = 0.75 / 0.75 = 1; v = 0.001 + 0.999*0.001 ... vhat = 1
        let m2: f64 = 0.5 * 0.5 + 0.5;
        let v2: f64 = 0.999 * 0.001 + 0.001;
        let expect = 0.1 * (m2 / (1.0 - 0.25)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((second - expect).abs() < 1e-12);
        assert!(second <= first + 1e-12);
    }

    #[test]
    fn adam_zero_gradient_only_decays_moments() {
        let tc = TrainConfig::default();
        let mut p = Tensor::new(crate::tensor::Shape::new(2, 1, 1), vec![1.0, -2.0]);
        let mut st = AdamState::new(&[&p]);
        st.m[0] = Tensor::new(p.shape(), vec![0.4, 0.0]);
        st.v[0] = Tensor::new(p.shape(), vec![0.2, 0.0]);
        let mut tc0 = tc.clone();
        tc0.lr = 0.0;
        let zero = Tensor::zeros(p.shape());
        adam_step(&mut st, &mut [&mut p], &[zero], &tc0).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.m[0].data(), &[0.2, 0.0]);
        assert!((st.v[0].data()[0] - 0.1998).abs() < 1e-15);
        // with zero moments a zero gradient leaves parameters untouched at any lr
        let mut q = Tensor::scalar(3.0);
        let mut st = AdamState::new(&[&q]);
        adam_step(&mut st, &mut [&mut q], &[Tensor::scalar(0.0)], &tc).unwrap();
        assert_eq!(q.item(), 3.0);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let tc = TrainConfig::default();
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p]);
        let g = Tensor::zeros(crate::tensor::Shape::new(2, 1, 1));
        assert!(matches!(
            adam_step(&mut st, &mut [&mut p], &[g], &tc),
            Err(crate::Error::Usage(_))
        ));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new(crate::tensor::Shape::new(2, 1, 1), vec![3.0, 4.0])];
        let (n, fired) = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!(fired);
        assert!((g[0].norm_sq() - 1.0).abs() < 1e-12);
        let (_, fired) = clip_global_norm(&mut g, 10.0);
        assert!(!fired);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in UstabVariant::ALL {
            assert_eq!(v.name().parse::<UstabVariant>().unwrap(), v);
        }
    }
}
