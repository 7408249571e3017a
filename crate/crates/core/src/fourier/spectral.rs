use super::ForwardOperator;
use crate::error::{Error, Result};
use crate::rng::gaussian_vec;

/// A real-linear map on `R^dim`. Complex fields are viewed as stacked planes.
pub trait LinearMap {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_adjoint(&self, x: &[f64]) -> Vec<f64>;
    /// Self-adjoint positive semi-definite maps are iterated directly.
    fn is_self_adjoint_psd(&self) -> bool {
        false
    }
}

pub struct IdentityMap(pub usize);

impl LinearMap for IdentityMap {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn apply_adjoint(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn is_self_adjoint_psd(&self) -> bool {
        true
    }
}

pub struct DiagonalMap(pub Vec<f64>);

impl LinearMap for DiagonalMap {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.0).map(|(a, d)| a * d).collect()
    }
    fn apply_adjoint(&self, x: &[f64]) -> Vec<f64> {
        self.apply(x)
    }
    fn is_self_adjoint_psd(&self) -> bool {
        self.0.iter().all(|d| *d >= 0.0)
    }
}

impl LinearMap for ForwardOperator {
    fn dim(&self) -> usize {
        ForwardOperator::dim(self)
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.forward_planes(x)
    }
    fn apply_adjoint(&self, x: &[f64]) -> Vec<f64> {
        self.adjoint_planes(x)
    }
}

/// `A^H A`.
pub struct NormalOperator<'a>(pub &'a ForwardOperator);

impl LinearMap for NormalOperator<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.normal_planes(x)
    }
    fn apply_adjoint(&self, x: &[f64]) -> Vec<f64> {
        self.apply(x)
    }
    fn is_self_adjoint_psd(&self) -> bool {
        true
    }
}

/// `(A^H A + lambda I)^{-1}`, each application a CG solve.
pub struct DcInverse<'a> {
    pub op: &'a ForwardOperator,
    pub lambda: f64,
    pub cg_tol: f64,
    pub cg_max: usize,
    unconverged: std::cell::Cell<usize>,
}

impl<'a> DcInverse<'a> {
    pub fn new(op: &'a ForwardOperator, lambda: f64, cg_tol: f64, cg_max: usize) -> Self {
        Self {
            op,
            lambda,
            cg_tol,
            cg_max,
            unconverged: std::cell::Cell::new(0),
        }
    }

    /// Number of applications whose CG solve hit the iteration cap.
    pub fn unconverged_solves(&self) -> usize {
        self.unconverged.get()
    }
}

impl LinearMap for DcInverse<'_> {
    fn dim(&self) -> usize {
        self.op.dim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let out = self.op.solve_regularized(x, self.lambda, self.cg_tol, self.cg_max);
        if !out.converged {
            self.unconverged.set(self.unconverged.get() + 1);
        }
        out.x
    }
    fn apply_adjoint(&self, x: &[f64]) -> Vec<f64> {
        self.apply(x)
    }
    fn is_self_adjoint_psd(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    /// Relative change between the last two estimates.
    pub last_change: f64,
    pub converged: bool,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Largest singular value by power iteration from a seeded Gaussian start.
/// Non-self-adjoint maps are iterated as `op^H op`.
pub fn spectral_norm(op: &dyn LinearMap, iters: usize, tol: f64, seed: u64) -> Result<SpectralEstimate> {
    if iters == 0 {
        return Err(Error::Usage("power iteration needs at least one step".into()));
    }
    let mut v = gaussian_vec(seed, &[0x5045], op.dim(), 1.0);
    normalize(&mut v);
    let step = |v: &[f64]| -> Vec<f64> {
        if op.is_self_adjoint_psd() {
            op.apply(v)
        } else {
            op.apply_adjoint(&op.apply(v))
        }
    };
    let mut estimate = 0.0;
    let mut last_change = f64::INFINITY;
    for k in 1..=iters {
        let mut w = step(&v);
        let lambda = normalize(&mut w);
        if lambda == 0.0 {
            return Ok(SpectralEstimate {
                value: 0.0,
                iterations: k,
                last_change: 0.0,
                converged: true,
            });
        }
        let value = if op.is_self_adjoint_psd() {
            lambda
        } else {
            lambda.sqrt()
        };
        last_change = ((value - estimate) / value).abs();
        estimate = value;
        v = w;
        if last_change <= tol {
            return Ok(SpectralEstimate {
                value,
                iterations: k,
                last_change,
                converged: true,
            });
        }
    }
    Ok(SpectralEstimate {
        value: estimate,
        iterations: iters,
        last_change,
        converged: false,
    })
}

/// `||(A^H A + lambda I)^{-1}||_2` by power iteration over CG solves. The
/// estimate is flagged unconverged if the iteration or any CG solve was.
pub fn alpha_constant(op: &ForwardOperator, lambda: f64) -> Result<SpectralEstimate> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    let inv = DcInverse::new(op, lambda, 1e-12, 200);
    let mut est = spectral_norm(&inv, 500, 1e-12, 0xa1fa)?;
    est.converged &= inv.unconverged_solves() == 0;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::{make_vd_mask, SamplingMask};

    #[test]
    fn identity_has_unit_norm() {
        let e = spectral_norm(&IdentityMap(16), 50, 1e-12, 1).unwrap();
        assert!((e.value - 1.0).abs() < 1e-8);
    }

    #[test]
    fn diagonal_norm_is_largest_entry() {
        let e = spectral_norm(&DiagonalMap(vec![3.0, 1.0, 0.5]), 500, 1e-14, 2).unwrap();
        assert!((e.value - 3.0).abs() < 1e-6);
        // negative entries force the op^H op route
        let e = spectral_norm(&DiagonalMap(vec![-3.0, 1.0]), 500, 1e-14, 2).unwrap();
        assert!((e.value - 3.0).abs() < 1e-6);
    }

    #[test]
    fn forward_operator_has_unit_norm() {
        for (accel, seed) in [(2.0, 1), (4.0, 2), (8.0, 3)] {
            let a = ForwardOperator::new(make_vd_mask(16, 16, accel, 0.1, seed).unwrap());
            let e = spectral_norm(&a, 100, 1e-12, seed).unwrap();
            assert!((e.value - 1.0).abs() < 1e-6, "accel {accel}: {}", e.value);
        }
    }

    #[test]
    fn alpha_constants_match_eigenvalues() {
        let under = ForwardOperator::new(make_vd_mask(16, 16, 4.0, 0.1, 9).unwrap());
        assert!((alpha_constant(&under, 1.0).unwrap().value - 1.0).abs() < 1e-6);
        let full = ForwardOperator::new(SamplingMask::full(16, 16).unwrap());
        assert!((alpha_constant(&full, 1.0).unwrap().value - 0.5).abs() < 1e-6);
        assert!((alpha_constant(&full, 2.0).unwrap().value - 1.0 / 3.0).abs() < 1e-6);
        assert!(alpha_constant(&full, 0.0).is_err());
    }

    #[test]
    fn iteration_cap_is_flagged() {
        let e = spectral_norm(&DiagonalMap(vec![1.0, 0.999, 0.998]), 2, 1e-15, 3).unwrap();
        assert!(!e.converged);
    }
}
