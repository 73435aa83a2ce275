//! Dense row-major tensors and the numeric kernels behind them.
//!
//! Storage is shared (`Arc`) so cloning a tensor, including a large weight
//! matrix, is O(1). Tensors never change after construction.

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (inference, storage)
/// and `f64` (gradient verification).
pub trait Scalar:
    Float + Default + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `c = a * b` for an `m×k` by `k×n` product with arbitrary strides.
    ///
    /// # Safety
    /// Strides must address elements inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Nearest representable value (saturating to ±inf).
    fn from_f64(x: f64) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        // widen to f64 so that products accumulate in double precision
        let widen = |p: *const f32, rows: usize, cols: usize, rs: isize, cs: isize| {
            let mut v = Vec::with_capacity(rows * cols);
            for i in 0..rows as isize {
                for j in 0..cols as isize {
                    v.push(*p.offset(i * rs + j * cs) as f64);
                }
            }
            v
        };
        let (a64, b64) = (widen(a, m, k, rsa, csa), widen(b, k, n, rsb, csb));
        let mut c64 = vec![0.0f64; m * n];
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a64.as_ptr(),
            k as isize,
            1,
            b64.as_ptr(),
            n as isize,
            1,
            0.0,
            c64.as_mut_ptr(),
            n as isize,
            1,
        );
        for i in 0..m {
            for j in 0..n {
                *c.offset(i as isize * rsc + j as isize * csc) = c64[i * n + j] as f32;
            }
        }
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Immutable n-dimensional array.
#[derive(Clone)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    /// Rank-1 tensor over `data`.
    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: data.into(),
        }
    }

    pub fn from_f64s(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n].into(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value].into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// First element; meant for single-element tensors.
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[])),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

/// Slice-level kernels shared by the forward and backward passes.
pub mod kernels {
    use super::Scalar;

    const LANES: usize = 16;

    /// Dot product accumulated in f64 with independent partial sums so the
    /// loop vectorizes. Summation order is fixed for a given length.
    #[inline]
    pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
        T::from_f64(dot_f64(a, b))
    }

    #[inline]
    fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f64; LANES];
        let ca = a.chunks_exact(LANES);
        let cb = b.chunks_exact(LANES);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for i in 0..LANES {
                acc[i] += x[i].as_f64() * y[i].as_f64();
            }
        }
        let mut s = acc.iter().sum::<f64>();
        for (x, y) in ra.iter().zip(rb) {
            s += x.as_f64() * y.as_f64();
        }
        s
    }

    /// `y += alpha * x` in f64.
    #[inline]
    fn axpy_f64<T: Scalar>(alpha: f64, x: &[T], y: &mut [f64]) {
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi.as_f64();
        }
    }

    /// Rows below which a product is computed row by row instead of through
    /// the packed gemm kernel.
    const SMALL_M: usize = 4;

    /// `c[m×n] = a[m×k] · b[k×n]`, all row-major.
    pub fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        if m <= SMALL_M {
            let mut acc = vec![0.0f64; n];
            for i in 0..m {
                acc.fill(0.0);
                for p in 0..k {
                    axpy_f64(a[i * k + p].as_f64(), &b[p * n..(p + 1) * n], &mut acc);
                }
                for (ci, &v) in c[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                    *ci = T::from_f64(v);
                }
            }
            return;
        }
        // SAFETY: strides describe dense row-major buffers of the stated sizes.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// `c[m×n] = a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        if m <= SMALL_M {
            for i in 0..m {
                let ai = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] = dot(ai, &b[j * k..(j + 1) * k]);
                }
            }
            return;
        }
        // SAFETY: b is read transposed through its strides; sizes as stated.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                1,
                k as isize,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// `c[m×n] += a[k×m]ᵀ · b[k×n]`
    pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        if k <= SMALL_M {
            let mut acc: Vec<f64> = c.iter().map(|v| v.as_f64()).collect();
            for p in 0..k {
                for i in 0..m {
                    axpy_f64(a[p * m + i].as_f64(), &b[p * n..(p + 1) * n], &mut acc[i * n..(i + 1) * n]);
                }
            }
            for (ci, v) in c.iter_mut().zip(acc) {
                *ci = T::from_f64(v);
            }
            return;
        }
        let mut tmp = vec![T::zero(); m * n];
        // SAFETY: a is read transposed through its strides.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                a.as_ptr(),
                1,
                m as isize,
                b.as_ptr(),
                n as isize,
                1,
                tmp.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for (ci, ti) in c.iter_mut().zip(tmp) {
            *ci = *ci + ti;
        }
    }

    /// Mean and variance of `x`, accumulated in f64.
    pub fn moments<T: Scalar>(x: &[T]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = x
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var)
    }
}
