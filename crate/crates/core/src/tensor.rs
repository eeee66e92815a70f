//! Dense row-major tensors and the handful of kernels the network needs.
//!
//! There is no broadcasting: every binary operation requires identical
//! shapes and reports a [`Error::Shape`] otherwise. A rank-2 tensor is a
//! [`Matrix`]; matrix products go through `matrixmultiply`'s packed GEMM,
//! which handles transposed operands through strides instead of copies.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is used for training, `f64` for
/// finite-difference gradient verification.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// Name stored in checkpoint tensor directories.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Strides must describe valid, in-bounds views of the given slices.
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

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// A tensor of rank exactly 2, `rows x cols`.
pub type Matrix<T = f32> = Tensor<T>;

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive: {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from nested rows of `f64` literals. Handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let data = rows
            .iter()
            .flat_map(|row| row.iter().map(|&v| T::from_f64(v)))
            .collect();
        Self::new(&[r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn linear_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, d)| i >= d) {
            return Err(Error::shape("index", &self.shape, index));
        }
        Ok(index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i))
    }

    pub fn unravel(&self, mut linear: usize) -> Vec<usize> {
        let mut index = vec![0; self.shape.len()];
        for (slot, &d) in index.iter_mut().zip(&self.shape).rev() {
            *slot = linear % d;
            linear /= d;
        }
        index
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.linear_index(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let i = self.linear_index(index)?;
        self.data[i] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.axpy(T::one(), other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        let mut out = self.clone();
        out.axpy(-T::one(), other)?;
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(
            T::zero(),
            |acc, &v| if v.abs() > acc { v.abs() } else { acc },
        )
    }

    pub fn frobenius_sq(&self) -> T {
        frobenius_sq(self)
    }

    pub fn l1_norm(&self) -> T {
        l1_norm(self)
    }

    // ----- rank-2 helpers -----

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn column(&self, j: usize) -> Result<Vec<T>> {
        let (r, c) = self.require_matrix("column")?;
        if j >= c {
            return Err(Error::shape("column", &self.shape, &[j]));
        }
        Ok((0..r).map(|i| self.data[i * c + j]).collect())
    }

    /// Euclidean norm of every column.
    pub fn column_norms(&self) -> Result<Vec<T>> {
        let (r, c) = self.require_matrix("column_norms")?;
        // Accumulated in f64 so f32 norms are correctly rounded for practical sizes.
        let mut sq = vec![0.0f64; c];
        for i in 0..r {
            for (acc, &v) in sq.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                let v = Scalar::to_f64(v);
                *acc += v * v;
            }
        }
        Ok(sq.into_iter().map(|v| T::from_f64(v.sqrt())).collect())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new(&[c, r], out)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        matmul(self, rhs)
    }
}

/// `C = A * B`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    gemm_new(a, false, b, false)
}

/// `op(A) * op(B)` into a fresh matrix, where `op` optionally transposes.
pub fn gemm_new<T: Scalar>(
    a: &Matrix<T>,
    trans_a: bool,
    b: &Matrix<T>,
    trans_b: bool,
) -> Result<Matrix<T>> {
    let (m, _) = op_dims(a, trans_a, "matmul", b)?;
    let (_, n) = op_dims(b, trans_b, "matmul", a)?;
    let mut c = Tensor::zeros(&[m, n]);
    gemm(T::one(), a, trans_a, b, trans_b, T::zero(), &mut c)?;
    Ok(c)
}

fn op_dims<T: Scalar>(
    x: &Matrix<T>,
    trans: bool,
    op: &'static str,
    other: &Matrix<T>,
) -> Result<(usize, usize)> {
    match x.shape[..] {
        [r, c] if trans => Ok((c, r)),
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, &x.shape, &other.shape)),
    }
}

/// `C = alpha * op(A) * op(B) + beta * C`. When `beta` is zero `C` is not read.
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &Matrix<T>,
    trans_a: bool,
    b: &Matrix<T>,
    trans_b: bool,
    beta: T,
    c: &mut Matrix<T>,
) -> Result<()> {
    let (m, k) = op_dims(a, trans_a, "matmul", b)?;
    let (k2, n) = op_dims(b, trans_b, "matmul", a)?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    if c.shape != [m, n] {
        return Err(Error::shape("matmul output", &c.shape, &[m, n]));
    }
    gemm_slices(
        m,
        k,
        n,
        alpha,
        &a.data,
        trans_a,
        &b.data,
        trans_b,
        beta,
        &mut c.data,
    );
    Ok(())
}

/// Slice-level GEMM on contiguous row-major operands. `a` holds `op(A)` of
/// size `m x k` (stored `k x m` when `trans_a`), likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_slices<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the assert above bounds every strided access.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
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

/// Sum of squared entries.
pub fn frobenius_sq<T: Scalar>(a: &Tensor<T>) -> T {
    a.data.iter().map(|&v| v * v).sum()
}

/// Sum of absolute entries.
pub fn l1_norm<T: Scalar>(a: &Tensor<T>) -> T {
    a.data.iter().map(|&v| v.abs()).sum()
}
