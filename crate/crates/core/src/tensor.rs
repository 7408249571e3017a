//! Dense `channels x height x width` tensors and the convolution kernels
//! shared by the inference path and the tape.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { c: 1, h: 1, w: 1 };

    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}x{}x{}]", self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data does not match {shape}");
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, vec![0.0; shape.len()])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(Shape::SCALAR, vec![v])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {}", self.shape);
        self.data[0]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `x` (`cin x h x w`) into a `(cin*k*k) x (h*w)` patch matrix for a
/// stride-1 convolution with zero padding `k/2`.
pub(crate) fn im2col(x: &[f64], shape: Shape, k: usize) -> Vec<f64> {
    let (h, w) = (shape.h, shape.w);
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![0.0; shape.c * k * k * hw];
    for ci in 0..shape.c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let di = ki as isize - p;
                let dj = kj as isize - p;
                for r in 0..h {
                    let sr = r as isize + di;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sr as usize * w..(sr as usize + 1) * w];
                    let c_lo = (-dj).max(0) as usize;
                    let c_hi = (w as isize - dj).min(w as isize) as usize;
                    if c_lo >= c_hi {
                        continue;
                    }
                    let s_lo = (c_lo as isize + dj) as usize;
                    dst[r * w + c_lo..r * w + c_hi].copy_from_slice(&src_row[s_lo..s_lo + (c_hi - c_lo)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im(col: &[f64], shape: Shape, k: usize) -> Vec<f64> {
    let (h, w) = (shape.h, shape.w);
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; shape.len()];
    for ci in 0..shape.c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let di = ki as isize - p;
                let dj = kj as isize - p;
                for r in 0..h {
                    let sr = r as isize + di;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let c_lo = (-dj).max(0) as usize;
                    let c_hi = (w as isize - dj).min(w as isize) as usize;
                    if c_lo >= c_hi {
                        continue;
                    }
                    let s_lo = (c_lo as isize + dj) as usize;
                    let dst_row = &mut plane[sr as usize * w..(sr as usize + 1) * w];
                    for (d, s) in dst_row[s_lo..s_lo + (c_hi - c_lo)]
                        .iter_mut()
                        .zip(&src[r * w + c_lo..r * w + c_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 "same" convolution (cross-correlation). `weight` is
/// `cout x cin x k x k`, `bias` has `cout` entries.
pub fn conv2d(x: &[f64], shape: Shape, weight: &[f64], cout: usize, k: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let hw = shape.plane();
    let col = im2col(x, shape, k);
    let mut out = vec![0.0; cout * hw];
    if let Some(b) = bias {
        for (co, bv) in b.iter().enumerate() {
            out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = *bv);
        }
    }
    gemm(
        cout,
        shape.c * k * k,
        hw,
        weight,
        false,
        &col,
        false,
        &mut out,
        if bias.is_some() { 1.0 } else { 0.0 },
    );
    out
}

/// Gradients of [`conv2d`] given the upstream gradient `dy` (`cout x h x w`).
/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    shape: Shape,
    weight: &[f64],
    cout: usize,
    k: usize,
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let hw = shape.plane();
    let kk = shape.c * k * k;
    let col = im2col(x, shape, k);
    let mut dw = vec![0.0; cout * kk];
    gemm(cout, hw, kk, dy, false, &col, true, &mut dw, 0.0);
    let db = (0..cout).map(|co| dy[co * hw..(co + 1) * hw].iter().sum()).collect();
    let dx = need_dx.then(|| {
        let mut dcol = vec![0.0; kk * hw];
        gemm(kk, cout, hw, weight, true, dy, false, &mut dcol, 0.0);
        col2im(&dcol, shape, k)
    });
    (dx, dw, db)
}
