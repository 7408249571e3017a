use std::sync::Arc;

use super::tape::{accumulate, CgRecord, Op, Tape, Var};
use crate::error::{usage, validation, Result};
use crate::fourier::{dft2_planes, idft2_planes, ForwardOperator, SamplingMask};
use crate::tensor::{conv2d, conv2d_backward, Shape, Tensor};

const NORM_EPS: f64 = 1e-5;

fn same_shape(a: Var, b: Var, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(validation(format!("{what}: shapes {} and {} differ", a.shape, b.shape)));
    }
    Ok(())
}

fn scalar_var(v: Var, what: &str) -> Result<()> {
    if v.shape.len() != 1 {
        return Err(validation(format!(
            "{what}: expected a one-element variable, got {}",
            v.shape
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep the open interval even where f64 rounds to 0 or 1
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl Tape {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = Tensor::new(x.shape, self.value(x).data().iter().map(|v| f(*v)).collect());
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| f(*p, *q))
            .collect();
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(Tensor::new(a.shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |p, q| p + q, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |p, q| p - q, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |p, q| p * q, Op::Mul(a.id, b.id)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x.id, s))
    }

    /// Multiplies every entry of `x` by the one-element variable `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        scalar_var(s, "mul_scalar")?;
        let sv = self.scalar(s);
        let value = Tensor::new(x.shape, self.value(x).data().iter().map(|v| v * sv).collect());
        let rg = self.any_grad(&[x.id, s.id]);
        Ok(self.push(value, Op::MulScalar(x.id, s.id), rg))
    }

    pub fn recip(&mut self, s: Var) -> Result<Var> {
        scalar_var(s, "recip")?;
        if self.scalar(s) == 0.0 {
            return Err(validation("recip of zero"));
        }
        Ok(self.unary(s, |v| 1.0 / v, Op::Recip(s.id)))
    }

    /// Sum of several same-shape variables, left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (first, rest) = xs.split_first().ok_or_else(|| usage("add_all of nothing"))?;
        let mut acc = *first;
        for x in rest {
            acc = self.add(acc, *x)?;
        }
        Ok(acc)
    }

    /// Stride-1 convolution with zero padding preserving the spatial shape.
    /// `weight` has shape `[cout, cin*k*k, 1]`; `bias` (optional) `[cout, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, k: usize) -> Result<Var> {
        let cout = weight.shape.c;
        if k.is_multiple_of(2) || weight.shape.h != x.shape.c * k * k || weight.shape.w != 1 {
            return Err(validation(format!(
                "conv2d: weight {} incompatible with input {} and kernel {k}",
                weight.shape, x.shape
            )));
        }
        if let Some(b) = bias {
            if b.shape.len() != cout {
                return Err(validation(format!("conv2d: bias {} for {cout} outputs", b.shape)));
            }
        }
        let out = conv2d(
            self.value(x).data(),
            x.shape,
            self.value(weight).data(),
            cout,
            k,
            bias.map(|b| self.value(b).data()),
        );
        let mut ids = vec![x.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.any_grad(&ids);
        let shape = Shape::new(cout, x.shape.h, x.shape.w);
        Ok(self.push(
            Tensor::new(shape, out),
            Op::Conv2d {
                x: x.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                k,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if let Some(k) = self.kinks.as_mut() {
            let vals = self.nodes[x.id].value.data();
            k.extend(vals.iter().map(|v| u8::from(*v > 0.0)));
        }
        self.unary(x, |v| v.max(0.0), Op::Relu(x.id))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x.id))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.id))
    }

    /// Per-channel standardization over the spatial plane followed by a
    /// learned per-channel affine map. `gamma`, `beta` are `[c, 1, 1]`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = x.shape.c;
        if gamma.shape.len() != c || beta.shape.len() != c {
            return Err(validation(
                "channel_norm: affine parameters must have one entry per channel",
            ));
        }
        let hw = x.shape.plane();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let plane = &xv[ch * hw..(ch + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = is;
            for i in 0..hw {
                let xh = (plane[i] - mean) * is;
                xhat[ch * hw + i] = xh;
                out[ch * hw + i] = g[ch] * xh + b[ch];
            }
        }
        let rg = self.any_grad(&[x.id, gamma.id, beta.id]);
        Ok(self.push(
            Tensor::new(x.shape, out),
            Op::ChannelNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).norm_sq();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(v), Op::SumSquares(x.id), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(v), Op::Sum(x.id), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = x.shape.len() as f64;
        let v = self.value(x).data().iter().sum::<f64>() / n;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(v), Op::Mean(x.id), rg)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| usage("concat of nothing"))?;
        if xs
            .iter()
            .any(|v| v.shape.h != first.shape.h || v.shape.w != first.shape.w)
        {
            return Err(validation("concat_channels: spatial shapes differ"));
        }
        let c = xs.iter().map(|v| v.shape.c).sum();
        let mut data = Vec::with_capacity(c * first.shape.plane());
        for v in xs {
            data.extend_from_slice(self.value(*v).data());
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(
            Tensor::new(Shape::new(c, first.shape.h, first.shape.w), data),
            Op::Concat(ids),
            rg,
        ))
    }

    fn complex_check(x: Var, what: &str) -> Result<()> {
        if x.shape.c != 2 {
            return Err(validation(format!("{what}: expected two channels, got {}", x.shape)));
        }
        Ok(())
    }

    /// Unitary 2D DFT of a two-channel complex tensor.
    pub fn dft2(&mut self, x: Var) -> Result<Var> {
        Self::complex_check(x, "dft2")?;
        let out = dft2_planes(x.shape.h, x.shape.w, self.value(x).data());
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(x.shape, out), Op::Dft2(x.id), rg))
    }

    pub fn idft2(&mut self, x: Var) -> Result<Var> {
        Self::complex_check(x, "idft2")?;
        let out = idft2_planes(x.shape.h, x.shape.w, self.value(x).data());
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(x.shape, out), Op::Idft2(x.id), rg))
    }

    pub fn mask_apply(&mut self, x: Var, mask: Arc<SamplingMask>) -> Result<Var> {
        Self::complex_check(x, "mask_apply")?;
        if (mask.height(), mask.width()) != (x.shape.h, x.shape.w) {
            return Err(validation("mask_apply: mask shape mismatch"));
        }
        let mut out = self.value(x).data().to_vec();
        mask.apply_in_place(&mut out);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(x.shape, out), Op::Mask(x.id, mask), rg))
    }

    /// Data-consistency solve `x = (A^H A + lambda I)^{-1} (A^H y + lambda z)`
    /// by CG; differentiated implicitly with one extra solve.
    pub fn dc_solve(
        &mut self,
        op: Arc<ForwardOperator>,
        y: Var,
        z: Var,
        lambda: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<Var> {
        Self::complex_check(y, "dc_solve")?;
        same_shape(y, z, "dc_solve")?;
        if op.shape() != (y.shape.h, y.shape.w) {
            return Err(validation("dc_solve: operator shape mismatch"));
        }
        if !(lambda > 0.0) {
            return Err(validation(format!("dc_solve: lambda must be positive, got {lambda}")));
        }
        let mut rhs = op.adjoint_planes(self.value(y).data());
        for (r, zv) in rhs.iter_mut().zip(self.value(z).data()) {
            *r += lambda * zv;
        }
        let out = op.solve_regularized(&rhs, lambda, tol, max_iter);
        self.cg_log.push(CgRecord {
            iterations: out.iterations,
            rel_residual: out.rel_residual,
            converged: out.converged,
            backward: false,
        });
        let rg = self.any_grad(&[y.id, z.id]);
        Ok(self.push(
            Tensor::new(y.shape, out.x),
            Op::DcSolve {
                y: y.id,
                z: z.id,
                op,
                lambda,
                tol,
                max_iter,
            },
            rg,
        ))
    }

    /// `sign(u) * max(|u| - theta, 0)` with a one-element threshold.
    pub fn soft_threshold(&mut self, x: Var, theta: Var) -> Result<Var> {
        scalar_var(theta, "soft_threshold")?;
        let t = self.scalar(theta);
        if let Some(k) = self.kinks.as_mut() {
            let vals = self.nodes[x.id].value.data();
            k.extend(vals.iter().map(|v| {
                if *v > t {
                    2
                } else if *v < -t {
                    0
                } else {
                    1
                }
            }));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|u| u.signum() * (u.abs() - t).max(0.0))
            .collect();
        let rg = self.any_grad(&[x.id, theta.id]);
        Ok(self.push(
            Tensor::new(x.shape, data),
            Op::SoftThreshold {
                x: x.id,
                theta: theta.id,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let hw = x.shape.plane();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.requires_grad(x);
        self.push(
            Tensor::new(Shape::new(x.shape.c, 1, 1), data),
            Op::GlobalAvgPool(x.id),
            rg,
        )
    }

    /// Dense layer on a flattened input. `weight` is `[out, in, 1]`, `bias` `[out, 1, 1]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let n_in = x.shape.len();
        let n_out = weight.shape.c;
        if weight.shape.h != n_in || weight.shape.w != 1 || bias.shape.len() != n_out {
            return Err(validation(format!(
                "linear: weight {} / bias {} incompatible with input {}",
                weight.shape, bias.shape, x.shape
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let data = (0..n_out)
            .map(|o| {
                bv[o]
                    + wv[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(xv)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        let rg = self.any_grad(&[x.id, weight.id, bias.id]);
        Ok(self.push(
            Tensor::new(Shape::new(n_out, 1, 1), data),
            Op::Linear {
                x: x.id,
                w: weight.id,
                b: bias.id,
            },
            rg,
        ))
    }

    fn grad_needed(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub(crate) fn backprop_node(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        cg_log: &mut Vec<CgRecord>,
    ) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let map = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            Tensor::new(t.shape(), t.data().iter().enumerate().map(|(i, v)| f(i, *v)).collect())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.grad_needed(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.grad_needed(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.grad_needed(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.grad_needed(*b) {
                    accumulate(grads, *b, map(g, &|_, v| -v));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, map(g, &|_, v| v * s)),
            Op::Mul(a, b) => {
                if self.grad_needed(*a) {
                    let bv = val(*b).data();
                    accumulate(grads, *a, map(g, &|i, v| v * bv[i]));
                }
                if self.grad_needed(*b) {
                    let av = val(*a).data();
                    accumulate(grads, *b, map(g, &|i, v| v * av[i]));
                }
            }
            Op::MulScalar(x, s) => {
                let sv = val(*s).item();
                if self.grad_needed(*x) {
                    accumulate(grads, *x, map(g, &|_, v| v * sv));
                }
                if self.grad_needed(*s) {
                    let xv = val(*x).data();
                    let d: f64 = g.data().iter().zip(xv).map(|(p, q)| p * q).sum();
                    accumulate(grads, *s, Tensor::scalar(d));
                }
            }
            Op::Recip(s) => {
                let sv = val(*s).item();
                accumulate(grads, *s, Tensor::scalar(-g.item() / (sv * sv)));
            }
            Op::Conv2d { x, w, b, k } => {
                let xs = val(*x).shape();
                let cout = node.value.shape().c;
                let (dx, dw, db) = conv2d_backward(
                    val(*x).data(),
                    xs,
                    val(*w).data(),
                    cout,
                    *k,
                    g.data(),
                    self.grad_needed(*x),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(xs, dx));
                }
                if self.grad_needed(*w) {
                    accumulate(grads, *w, Tensor::new(val(*w).shape(), dw));
                }
                if let Some(b) = b {
                    if self.grad_needed(*b) {
                        accumulate(grads, *b, Tensor::new(val(*b).shape(), db));
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                accumulate(grads, *x, map(g, &|i, v| if xv[i] > 0.0 { v } else { 0.0 }));
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                accumulate(grads, *x, map(g, &|i, v| v * (1.0 - yv[i] * yv[i])));
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                accumulate(grads, *x, map(g, &|i, v| v * yv[i] * (1.0 - yv[i])));
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = val(*x).shape();
                let hw = shape.plane();
                let gam = val(*gamma).data();
                let gd = g.data();
                let mut dx = vec![0.0; shape.len()];
                let mut dgamma = vec![0.0; shape.c];
                let mut dbeta = vec![0.0; shape.c];
                for ch in 0..shape.c {
                    let r = ch * hw..(ch + 1) * hw;
                    let (gp, xh) = (&gd[r.clone()], &xhat[r.clone()]);
                    dbeta[ch] = gp.iter().sum();
                    dgamma[ch] = gp.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let mean_dxh = gam[ch] * dbeta[ch] / hw as f64;
                    let mean_dxh_xh = gam[ch] * dgamma[ch] / hw as f64;
                    for i in 0..hw {
                        dx[ch * hw + i] = inv_std[ch] * (gam[ch] * gp[i] - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
                if self.grad_needed(*x) {
                    accumulate(grads, *x, Tensor::new(shape, dx));
                }
                if self.grad_needed(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(val(*gamma).shape(), dgamma));
                }
                if self.grad_needed(*beta) {
                    accumulate(grads, *beta, Tensor::new(val(*beta).shape(), dbeta));
                }
            }
            Op::SumSquares(x) => {
                let gv = g.item();
                accumulate(grads, *x, map(val(*x), &|_, v| 2.0 * v * gv));
            }
            Op::Sum(x) => {
                let gv = g.item();
                accumulate(grads, *x, Tensor::new(val(*x).shape(), vec![gv; val(*x).len()]));
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let gv = g.item() / n as f64;
                accumulate(grads, *x, Tensor::new(val(*x).shape(), vec![gv; n]));
            }
            Op::Concat(ids) => {
                let mut offset = 0;
                for i in ids {
                    let s = val(*i).shape();
                    if self.grad_needed(*i) {
                        accumulate(grads, *i, Tensor::new(s, g.data()[offset..offset + s.len()].to_vec()));
                    }
                    offset += s.len();
                }
            }
            Op::Dft2(x) => {
                let s = val(*x).shape();
                accumulate(grads, *x, Tensor::new(s, idft2_planes(s.h, s.w, g.data())));
            }
            Op::Idft2(x) => {
                let s = val(*x).shape();
                accumulate(grads, *x, Tensor::new(s, dft2_planes(s.h, s.w, g.data())));
            }
            Op::Mask(x, mask) => {
                let mut d = g.data().to_vec();
                mask.apply_in_place(&mut d);
                accumulate(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::DcSolve {
                y,
                z,
                op,
                lambda,
                tol,
                max_iter,
            } => {
                // K = A^H A + lambda I is self-adjoint: u = K^{-1} g
                let out = op.solve_regularized(g.data(), *lambda, *tol, *max_iter);
                cg_log.push(CgRecord {
                    iterations: out.iterations,
                    rel_residual: out.rel_residual,
                    converged: out.converged,
                    backward: true,
                });
                let s = g.shape();
                if self.grad_needed(*z) {
                    accumulate(grads, *z, Tensor::new(s, out.x.iter().map(|u| lambda * u).collect()));
                }
                if self.grad_needed(*y) {
                    accumulate(grads, *y, Tensor::new(s, op.forward_planes(&out.x)));
                }
            }
            Op::SoftThreshold { x, theta } => {
                let t = val(*theta).item();
                let xv = val(*x).data();
                if self.grad_needed(*x) {
                    accumulate(grads, *x, map(g, &|i, v| if xv[i].abs() > t { v } else { 0.0 }));
                }
                if self.grad_needed(*theta) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(xv)
                        .filter(|(_, u)| u.abs() > t)
                        .map(|(gv, u)| -gv * u.signum())
                        .sum();
                    accumulate(grads, *theta, Tensor::scalar(d));
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s.plane();
                let gd = g.data();
                let data = (0..s.len()).map(|i| gd[i / hw] / hw as f64).collect();
                accumulate(grads, *x, Tensor::new(s, data));
            }
            Op::Linear { x, w, b } => {
                let xv = val(*x).data();
                let wv = val(*w).data();
                let gd = g.data();
                let n_in = xv.len();
                if self.grad_needed(*x) {
                    let mut dx = vec![0.0; n_in];
                    for (o, go) in gd.iter().enumerate() {
                        for i in 0..n_in {
                            dx[i] += go * wv[o * n_in + i];
                        }
                    }
                    accumulate(grads, *x, Tensor::new(val(*x).shape(), dx));
                }
                if self.grad_needed(*w) {
                    let dw = gd.iter().flat_map(|go| xv.iter().map(move |xi| go * xi)).collect();
                    accumulate(grads, *w, Tensor::new(val(*w).shape(), dw));
                }
                if self.grad_needed(*b) {
                    accumulate(grads, *b, Tensor::new(val(*b).shape(), gd.to_vec()));
                }
            }
        }
    }
}
