//! Learnable components: the bounded CNN denoiser, the weighting encoder and
//! per-phase ISTA-Net parameters. Each keeps its parameters as an ordered list
//! of named tensors so optimizers and checkpoints treat them uniformly.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{validation, Result};
use crate::fourier::ComplexImage;
use crate::rng::{rng_for, STREAM_INIT};
use crate::tensor::{conv2d, Shape, Tensor};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        Self { names, tensors }
    }

    fn expect_shapes(&self, other: &Params) -> Result<()> {
        if self.names != other.names
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(validation("parameter layout does not match the architecture"));
        }
        Ok(())
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

fn he_tensor(shape: Shape, fan_in: usize, seed: u64, path: &[u64]) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = rng_for(seed, path);
    Tensor::new(shape, (0..shape.len()).map(|_| normal.sample(&mut rng)).collect())
}

fn conv_weight_shape(cout: usize, cin: usize, k: usize) -> Shape {
    Shape::new(cout, cin * k * k, 1)
}

/// Architecture of the bounded denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Number of convolution layers (at least 2).
    pub layers: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Output bound `B`: every output entry lies in `[-B, B]`.
    pub bound: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            channels: 16,
            kernel: 3,
            bound: 1.5,
        }
    }
}

/// `D_theta`: conv layers with ReLU between them and a `B * tanh` output, on
/// two-channel (real, imaginary) images. Shared across unrolling steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    params: Params,
}

impl DenoiserNet {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.layers < 2 || config.channels == 0 || config.kernel.is_multiple_of(2) || !(config.bound >= 0.0) {
            return Err(validation(format!("invalid denoiser config {config:?}")));
        }
        let mut params = Params::new();
        let k = config.kernel;
        for l in 0..config.layers {
            let cin = if l == 0 { 2 } else { config.channels };
            let cout = if l + 1 == config.layers { 2 } else { config.channels };
            let w = he_tensor(
                conv_weight_shape(cout, cin, k),
                cin * k * k,
                seed,
                &[STREAM_INIT, 1, l as u64],
            );
            params.push(format!("conv{l}.weight"), w);
            params.push(format!("conv{l}.bias"), Tensor::zeros(Shape::new(cout, 1, 1)));
        }
        Ok(Self { config, params })
    }

    /// Same architecture with every parameter zero (output identically zero).
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        let mut net = Self::init(config, 0)?;
        net.params.tensors_mut().iter_mut().for_each(|t| t.scale_in_place(0.0));
        Ok(net)
    }

    pub fn from_params(config: DenoiserConfig, params: Params) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        reference.params.expect_shapes(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn bound(&self) -> f64 {
        self.config.bound
    }

    /// Applies the network on `tape` with parameters already bound as `vars`.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        if x.shape().c != 2 {
            return Err(validation(format!("denoiser expects two channels, got {}", x.shape())));
        }
        let mut h = x;
        for l in 0..self.config.layers {
            h = tape.conv2d(h, vars[2 * l], Some(vars[2 * l + 1]), self.config.kernel)?;
            if l + 1 < self.config.layers {
                h = tape.relu(h);
            }
        }
        let t = tape.tanh(h);
        Ok(tape.scale(t, self.config.bound))
    }

    pub fn denoise(&self, x: &ComplexImage) -> Result<ComplexImage> {
        let (h, w) = x.shape();
        ComplexImage::from_vec(h, w, self.apply_planes(x.as_slice(), h, w))
    }

    /// Tape-free forward pass on stacked `[re, im]` planes; bit-identical to
    /// [`Self::forward_on_tape`].
    pub fn apply_planes(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let t = self.params.tensors();
        let mut cur = x.to_vec();
        let mut shape = Shape::new(2, h, w);
        for l in 0..self.config.layers {
            let (wt, b) = (&t[2 * l], &t[2 * l + 1]);
            let cout = wt.shape().c;
            cur = conv2d(&cur, shape, wt.data(), cout, self.config.kernel, Some(b.data()));
            shape = Shape::new(cout, h, w);
            if l + 1 < self.config.layers {
                cur.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let bound = self.config.bound;
        cur.iter_mut().for_each(|v| *v = v.tanh() * bound);
        cur
    }

    /// Architectural upper bound on `2 max_x ||D(x)||_2` for an
    /// `height x width` complex image: `2 B sqrt(2 H W)`.
    pub fn bound_m(&self, height: usize, width: usize) -> f64 {
        2.0 * self.config.bound * ((2 * height * width) as f64).sqrt()
    }
}

/// Architecture of the weighting encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: 8, kernel: 3 }
    }
}

pub const ENCODER_STAGES: usize = 5;

/// `E_phi`: five (conv, channel norm, ReLU) stages, global average pooling, a
/// linear head and a sigmoid. Produces one weight in `(0, 1)` per image.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightEncoder {
    config: EncoderConfig,
    params: Params,
}

impl WeightEncoder {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 || config.kernel.is_multiple_of(2) {
            return Err(validation(format!("invalid encoder config {config:?}")));
        }
        let (c, k) = (config.channels, config.kernel);
        let mut params = Params::new();
        for s in 0..ENCODER_STAGES {
            let cin = if s == 0 { 2 } else { c };
            params.push(
                format!("stage{s}.conv"),
                he_tensor(
                    conv_weight_shape(c, cin, k),
                    cin * k * k,
                    seed,
                    &[STREAM_INIT, 2, s as u64],
                ),
            );
            params.push(
                format!("stage{s}.gamma"),
                Tensor::new(Shape::new(c, 1, 1), vec![1.0; c]),
            );
            params.push(format!("stage{s}.beta"), Tensor::zeros(Shape::new(c, 1, 1)));
        }
        params.push(
            "head.weight",
            he_tensor(Shape::new(1, c, 1), c, seed, &[STREAM_INIT, 2, 99]),
        );
        params.push("head.bias", Tensor::zeros(Shape::SCALAR));
        Ok(Self { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: Params) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        reference.params.expect_shapes(&params)?;
        Ok(Self { config, params })
    }

    /// Zeroes the linear head so every image gets weight 1/2.
    pub fn zero_head(&mut self) {
        let n = self.params.len();
        for t in &mut self.params.tensors_mut()[n - 2..] {
            t.scale_in_place(0.0);
        }
    }

    pub fn head_bias_mut(&mut self) -> &mut f64 {
        let n = self.params.len();
        &mut self.params.tensors_mut()[n - 1].data_mut()[0]
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        if x.shape().c != 2 {
            return Err(validation(format!("encoder expects two channels, got {}", x.shape())));
        }
        let mut h = x;
        for s in 0..ENCODER_STAGES {
            h = tape.conv2d(h, vars[3 * s], None, self.config.kernel)?;
            h = tape.channel_norm(h, vars[3 * s + 1], vars[3 * s + 2])?;
            h = tape.relu(h);
        }
        let pooled = tape.global_avg_pool(h);
        let n = vars.len();
        let logit = tape.linear(pooled, vars[n - 2], vars[n - 1])?;
        Ok(tape.sigmoid(logit))
    }

    pub fn encode_weight(&self, x: &ComplexImage) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xv = tape.constant(image_tensor(x));
        let out = self.forward_on_tape(&mut tape, &vars, xv)?;
        Ok(tape.scalar(out))
    }
}

/// Per-phase ISTA-Net architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IstaConfig {
    pub phases: usize,
    pub channels: usize,
    pub kernel: usize,
    pub init_step: f64,
    pub init_threshold: f64,
}

impl Default for IstaConfig {
    fn default() -> Self {
        Self {
            phases: 8,
            channels: 16,
            kernel: 3,
            init_step: 0.5,
            init_threshold: 0.01,
        }
    }
}

/// Unshared ISTA-Net phase parameters: gradient step, soft threshold and the
/// analysis/synthesis transform pairs (two bias-free convolutions each,
/// separated by a ReLU).
#[derive(Clone, Debug, PartialEq)]
pub struct IstaNetParams {
    config: IstaConfig,
    params: Params,
}

pub const ISTA_TENSORS_PER_PHASE: usize = 6;

impl IstaNetParams {
    pub fn init(config: IstaConfig, seed: u64) -> Result<Self> {
        if config.phases == 0 || config.channels == 0 || config.kernel.is_multiple_of(2) {
            return Err(validation(format!("invalid ISTA config {config:?}")));
        }
        let (c, k) = (config.channels, config.kernel);
        let mut params = Params::new();
        for p in 0..config.phases {
            let path = |i: u64| [STREAM_INIT, 3, p as u64, i];
            params.push(format!("phase{p}.step"), Tensor::scalar(config.init_step));
            params.push(format!("phase{p}.threshold"), Tensor::scalar(config.init_threshold));
            params.push(
                format!("phase{p}.fwd1"),
                he_tensor(conv_weight_shape(c, 2, k), 2 * k * k, seed, &path(0)),
            );
            params.push(
                format!("phase{p}.fwd2"),
                he_tensor(conv_weight_shape(c, c, k), c * k * k, seed, &path(1)),
            );
            params.push(
                format!("phase{p}.inv1"),
                he_tensor(conv_weight_shape(c, c, k), c * k * k, seed, &path(2)),
            );
            params.push(
                format!("phase{p}.inv2"),
                he_tensor(conv_weight_shape(2, c, k), c * k * k, seed, &path(3)),
            );
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: IstaConfig, params: Params) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        reference.params.expect_shapes(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &IstaConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn phase_vars<'a>(&self, vars: &'a [Var], phase: usize) -> &'a [Var] {
        &vars[phase * ISTA_TENSORS_PER_PHASE..(phase + 1) * ISTA_TENSORS_PER_PHASE]
    }

    /// Analysis transform `F^n`.
    pub fn analysis(&self, tape: &mut Tape, pv: &[Var], r: Var) -> Result<Var> {
        let k = self.config.kernel;
        let h = tape.conv2d(r, pv[2], None, k)?;
        let h = tape.relu(h);
        tape.conv2d(h, pv[3], None, k)
    }

    /// Synthesis transform `F^n` hat.
    pub fn synthesis(&self, tape: &mut Tape, pv: &[Var], u: Var) -> Result<Var> {
        let k = self.config.kernel;
        let h = tape.conv2d(u, pv[4], None, k)?;
        let h = tape.relu(h);
        tape.conv2d(h, pv[5], None, k)
    }
}

/// Complex image as a two-channel tensor.
pub fn image_tensor<D>(x: &crate::fourier::ComplexPlanes<D>) -> Tensor {
    Tensor::new(Shape::new(2, x.height(), x.width()), x.as_slice().to_vec())
}

/// Two-channel tensor back to a complex image.
pub fn tensor_image(t: &Tensor) -> ComplexImage {
    let s = t.shape();
    assert_eq!(s.c, 2, "complex tensors have two channels");
    ComplexImage::from_vec(s.h, s.w, t.data().to_vec()).expect("finite values from a finite pipeline")
}
