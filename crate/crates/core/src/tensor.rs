//! Dense row-major tensors and the scalar abstraction shared by the engine.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! with `f64`. Every tensor is viewed as a matrix `rows x cols` where `cols`
//! is the last dimension and `rows` the product of the rest.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{ArgusError, Result};

/// Scalar type a [`Tensor`] can hold.
pub trait Float:
    num_traits::Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c <- alpha * a·b + beta * c` over strided matrices.
    ///
    /// # Safety
    /// Strides and dimensions must describe in-bounds views of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Float for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ArgusError::Shape(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![F::zero(); n] }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&x| F::of(x)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension (1 for a 0-d shape).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(ArgusError::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| G::of(x.as_f64())).collect() }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }
}

/// Row-major matrix product `out (+)= op(a)·op(b)`.
///
/// `a` is `a_rows x a_cols` as stored; with `trans_a` the product uses its
/// transpose. Same for `b`. When `accumulate` is false `out` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    a: &[F],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[F],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    out: &mut [F],
    accumulate: bool,
) {
    let (m, k, rsa, csa) =
        if trans_a { (a_cols, a_rows, 1isize, a_cols as isize) } else { (a_rows, a_cols, a_cols as isize, 1isize) };
    let (k2, n, rsb, csb) =
        if trans_b { (b_cols, b_rows, 1isize, b_cols as isize) } else { (b_rows, b_cols, b_cols as isize, 1isize) };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n, "gemm output size mismatch");
    assert_eq!(a.len(), a_rows * a_cols);
    assert_eq!(b.len(), b_rows * b_cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|x| *x = F::zero());
        }
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the asserts above pin every view inside its slice.
    unsafe {
        F::gemm(m, k, n, F::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, out.as_mut_ptr(), n as isize, 1);
    }
}

/// Strided sub-matrix product used by attention heads.
///
/// Each operand is described by `(slice, offset, row_stride)` with unit
/// column stride; `rows`/`cols` are those of the view before transposition.
pub(crate) struct View<'a, F> {
    pub data: &'a [F],
    pub offset: usize,
    pub row_stride: usize,
    pub rows: usize,
    pub cols: usize,
}

impl<'a, F: Float> View<'a, F> {
    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.row_stride + self.cols - 1;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// `out (+)= op(a)·op(b)` into a dense `m x n` buffer with row stride `out_rs`.
pub(crate) fn gemm_view<F: Float>(
    a: &View<'_, F>,
    trans_a: bool,
    b: &View<'_, F>,
    trans_b: bool,
    out: &mut [F],
    out_offset: usize,
    out_rs: usize,
    accumulate: bool,
) {
    a.check();
    b.check();
    let (m, k, rsa, csa) = if trans_a {
        (a.cols, a.rows, 1isize, a.row_stride as isize)
    } else {
        (a.rows, a.cols, a.row_stride as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (b.cols, b.rows, 1isize, b.row_stride as isize)
    } else {
        (b.rows, b.cols, b.row_stride as isize, 1isize)
    };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    if m == 0 || n == 0 {
        return;
    }
    assert!(out_offset + (m - 1) * out_rs + n <= out.len(), "gemm output view out of bounds");
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                out[out_offset + r * out_rs..out_offset + r * out_rs + n].iter_mut().for_each(|x| *x = F::zero());
            }
        }
        return;
    }
    // SAFETY: bounds of all three views are asserted above.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr().add(a.offset),
            rsa,
            csa,
            b.data.as_ptr().add(b.offset),
            rsb,
            csb,
            beta,
            out.as_mut_ptr().add(out_offset),
            out_rs as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        gemm(&a, 2, 2, false, &b, 2, 2, false, &mut out, false);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        gemm(&a, 2, 2, true, &b, 2, 2, false, &mut out, false);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        gemm(&a, 2, 2, false, &b, 2, 2, true, &mut out, false);
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
        gemm(&a, 2, 2, false, &b, 2, 2, true, &mut out, true);
        assert_eq!(out, [34.0, 46.0, 78.0, 106.0]);
    }
}
