//! Complex image and k-space containers, the single-coil Cartesian forward
//! model `A = M F` with a unitary DFT, and the operator-norm estimates used
//! by the robustness bound.

mod cg;
mod dft;
mod mask;
mod operator;
mod spectral;

use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

pub use cg::{conjugate_gradient, CgOutcome};
pub use dft::{dft2_planes, dft2_unitary, idft2_planes, idft2_unitary};
pub use mask::{make_vd_mask, MaskSpec, SamplingMask};
pub use operator::{ForwardOperator, NormConvention};
pub use spectral::{
    alpha_constant, spectral_norm, DcInverse, DiagonalMap, IdentityMap, LinearMap, NormalOperator, SpectralEstimate,
};

/// Marker for image-domain data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Image;

/// Marker for spatial-frequency data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KSpace;

/// An `height x width` complex field stored as two real planes, real part
/// first, then imaginary part, each row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexPlanes<D> {
    height: usize,
    width: usize,
    data: Vec<f64>,
    _domain: PhantomData<D>,
}

pub type ComplexImage = ComplexPlanes<Image>;
pub type KSpaceData = ComplexPlanes<KSpace>;

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(validation(format!(
            "dimensions must be even and at least 2, got {height}x{width}"
        )));
    }
    Ok(())
}

impl<D> ComplexPlanes<D> {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            height,
            width,
            data: vec![0.0; 2 * height * width],
            _domain: PhantomData,
        })
    }

    pub fn from_planes(height: usize, width: usize, re: &[f64], im: &[f64]) -> Result<Self> {
        check_dims(height, width)?;
        let n = height * width;
        if re.len() != n || im.len() != n {
            return Err(validation(format!(
                "plane lengths {}/{} do not match {height}x{width}",
                re.len(),
                im.len()
            )));
        }
        let mut data = Vec::with_capacity(2 * n);
        data.extend_from_slice(re);
        data.extend_from_slice(im);
        Self::from_vec(height, width, data)
    }

    /// Builds from the stacked `[re..., im...]` layout.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != 2 * height * width {
            return Err(validation(format!(
                "expected {} values for {height}x{width}, got {}",
                2 * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(validation(format!("non-finite entry at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            data,
            _domain: PhantomData,
        })
    }

    /// Real-valued image (zero imaginary plane).
    pub fn from_real(height: usize, width: usize, re: &[f64]) -> Result<Self> {
        Self::from_planes(height, width, re, &vec![0.0; re.len()])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn re(&self) -> &[f64] {
        &self.data[..self.pixels()]
    }

    pub fn im(&self) -> &[f64] {
        &self.data[self.pixels()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Largest absolute real or imaginary component.
    pub fn max_abs_component(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Magnitude image `|x|`, row-major.
    pub fn magnitude(&self) -> Vec<f64> {
        self.re().iter().zip(self.im()).map(|(a, b)| a.hypot(*b)).collect()
    }

    /// Complex inner product `<self, other> = sum conj(self) * other`, returned
    /// as `(re, im)`.
    pub fn inner(&self, other: &Self) -> (f64, f64) {
        let n = self.pixels();
        let (ar, ai) = self.data.split_at(n);
        let (br, bi) = other.data.split_at(n);
        let mut re = 0.0;
        let mut im = 0.0;
        for k in 0..n {
            re += ar[k] * br[k] + ai[k] * bi[k];
            im += ar[k] * bi[k] - ai[k] * br[k];
        }
        (re, im)
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| f(*v)).collect(),
            _domain: PhantomData,
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
            _domain: PhantomData,
        }
    }

    pub(crate) fn from_vec_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 2 * height * width);
        Self {
            height,
            width,
            data,
            _domain: PhantomData,
        }
    }
}

/// Serializable snapshot of a complex field.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PlanesRecord {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl<D> From<&ComplexPlanes<D>> for PlanesRecord {
    fn from(x: &ComplexPlanes<D>) -> Self {
        Self {
            height: x.height,
            width: x.width,
            data: x.data.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_and_tiny_shapes() {
        assert!(ComplexImage::zeros(3, 4).is_err());
        assert!(ComplexImage::zeros(0, 4).is_err());
        assert!(ComplexImage::zeros(2, 2).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        let mut re = vec![0.0; 4];
        re[2] = f64::NAN;
        assert!(ComplexImage::from_real(2, 2, &re).is_err());
        re[2] = f64::INFINITY;
        assert!(ComplexImage::from_real(2, 2, &re).is_err());
    }

    #[test]
    fn inner_product_is_conjugate_linear_in_first_argument() {
        let a = ComplexImage::from_planes(2, 2, &[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = ComplexImage::from_planes(2, 2, &[0.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        // conj(1+i) * i = i + 1
        assert_eq!(a.inner(&b), (1.0, 1.0));
    }
}
