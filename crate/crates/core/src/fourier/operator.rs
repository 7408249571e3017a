use super::cg::{conjugate_gradient, CgOutcome};
use super::dft::{dft2_planes, idft2_planes};
use super::{ComplexImage, KSpaceData, SamplingMask};
use crate::error::{validation, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormConvention {
    /// `1/sqrt(HW)` in both directions.
    Unitary,
}

/// Single-coil Cartesian system matrix `A = M F`.
#[derive(Clone, Debug)]
pub struct ForwardOperator {
    mask: SamplingMask,
    norm_convention: NormConvention,
}

impl ForwardOperator {
    pub fn new(mask: SamplingMask) -> Self {
        Self {
            mask,
            norm_convention: NormConvention::Unitary,
        }
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn norm_convention(&self) -> NormConvention {
        self.norm_convention
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }

    /// Number of real unknowns in an image (two planes).
    pub fn dim(&self) -> usize {
        2 * self.mask.height() * self.mask.width()
    }

    fn check<D>(&self, x: &super::ComplexPlanes<D>) -> Result<()> {
        if x.shape() != self.shape() {
            return Err(validation(format!(
                "shape {:?} does not match operator {:?}",
                x.shape(),
                self.shape()
            )));
        }
        Ok(())
    }

    pub fn forward_planes(&self, x: &[f64]) -> Vec<f64> {
        let (h, w) = self.shape();
        let mut y = dft2_planes(h, w, x);
        self.mask.apply_in_place(&mut y);
        y
    }

    pub fn adjoint_planes(&self, y: &[f64]) -> Vec<f64> {
        let (h, w) = self.shape();
        let mut masked = y.to_vec();
        self.mask.apply_in_place(&mut masked);
        idft2_planes(h, w, &masked)
    }

    /// `A^H A x`.
    pub fn normal_planes(&self, x: &[f64]) -> Vec<f64> {
        self.adjoint_planes(&self.forward_planes(x))
    }

    pub fn apply_forward(&self, x: &ComplexImage) -> Result<KSpaceData> {
        self.check(x)?;
        let (h, w) = self.shape();
        Ok(KSpaceData::from_vec_unchecked(h, w, self.forward_planes(x.as_slice())))
    }

    pub fn apply_adjoint(&self, y: &KSpaceData) -> Result<ComplexImage> {
        self.check(y)?;
        let (h, w) = self.shape();
        Ok(ComplexImage::from_vec_unchecked(
            h,
            w,
            self.adjoint_planes(y.as_slice()),
        ))
    }

    /// Solves `(A^H A + lambda I) x = rhs` by conjugate gradients.
    pub fn solve_regularized(&self, rhs: &[f64], lambda: f64, tol: f64, max_iter: usize) -> CgOutcome {
        conjugate_gradient(
            |v| {
                let mut out = self.normal_planes(v);
                for (o, vi) in out.iter_mut().zip(v) {
                    *o += lambda * vi;
                }
                out
            },
            rhs,
            tol,
            max_iter,
        )
    }
}
