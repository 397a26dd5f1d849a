use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of the network (f32 for training, f64 for
/// gradient checking).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Row-major strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` matrices,
    /// and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major matrix view with an explicit row stride.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub transposed: bool,
}

impl<'a, S> Mat<'a, S> {
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, row_stride: cols, transposed: false }
    }

    pub fn strided(data: &'a [S], rows: usize, cols: usize, row_stride: usize) -> Self {
        Mat { data, rows, cols, row_stride, transposed: false }
    }

    pub fn t(self) -> Self {
        Mat { transposed: !self.transposed, ..self }
    }

    /// Logical shape after the transpose flag.
    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.row_stride as isize)
        } else {
            (self.row_stride as isize, 1)
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.row_stride + self.cols <= self.data.len()
    }
}

/// `C = alpha * A B + beta * C` where `c` is `m×n` with row stride `ldc`.
pub(crate) fn gemm<S: Scalar>(alpha: S, a: Mat<S>, b: Mat<S>, beta: S, c: &mut [S], ldc: usize) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(a.fits() && b.fits(), "operand slice too short");
    assert!(m == 0 || n == 0 || (m - 1) * ldc + n <= c.len(), "output slice too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: bounds are checked above and `c` is a distinct mutable borrow.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Batch of multi-channel images in NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<S> {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Tensor4 {
            batch,
            channels,
            height,
            width,
            values: vec![S::zero(); batch * channels * height * width],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, height: usize, width: usize, values: Vec<S>) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be positive, got {batch}x{channels}x{height}x{width}"
            )));
        }
        if values.len() != batch * channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {batch}x{channels}x{height}x{width} tensor",
                values.len()
            )));
        }
        Ok(Tensor4 { batch, channels, height, width, values })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|v| T::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(T::nan))
                .collect(),
        }
    }
}

impl<S> Tensor4<S> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn sample(&self, n: usize) -> &[S] {
        let len = self.sample_len();
        &self.values[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [S] {
        let len = self.sample_len();
        &mut self.values[n * len..(n + 1) * len]
    }

    /// One `height × width` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let len = self.plane_len();
        let start = (n * self.channels + c) * len;
        &self.values[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let len = self.plane_len();
        let start = (n * self.channels + c) * len;
        &mut self.values[start..start + len]
    }

    pub(crate) fn with_values<T>(&self, values: Vec<T>) -> Tensor4<T> {
        debug_assert_eq!(values.len(), self.values.len());
        Tensor4 {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            values,
        }
    }

    pub(crate) fn raw(batch: usize, channels: usize, height: usize, width: usize, values: Vec<S>) -> Self {
        debug_assert_eq!(values.len(), batch * channels * height * width);
        Tensor4 { batch, channels, height, width, values }
    }
}
