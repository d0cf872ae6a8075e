//! Dense NCHW tensors and the deterministic reductions the normalizers are
//! built on.
//!
//! Element `(n, c, h, w)` lives at `((n * C + c) * H + h) * W + w`, so one
//! sample flattened over `(C, H, W)` gives the merged dimension `D = C * H * W`
//! with the channel axis outermost.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn dtype_tag(self) -> u8 {
        match self {
            Precision::Single => 0,
            Precision::Double => 1,
        }
    }

    pub fn from_dtype_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::Single),
            1 => Some(Precision::Double),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "single" => Ok(Precision::Single),
            "f64" | "double" => Ok(Precision::Double),
            other => Err(Error::InvalidArgument(format!("unknown precision {other:?}"))),
        }
    }
}

/// Scalar element type of a tensor: `f32` or `f64`.
pub trait Real:
    Copy
    + Default
    + fmt::Debug
    + fmt::Display
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    /// Row-major `c = a' * b' (+ c if accumulate)` where `a'` is `m x k` and
    /// `b'` is `k x n`. `a_t` / `b_t` mean the stored buffer is the transpose.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! gemm_strides {
    ($m:expr, $k:expr, $n:expr, $a_t:expr, $b_t:expr) => {{
        let (rsa, csa) = if $a_t { (1, $m as isize) } else { ($k as isize, 1) };
        let (rsb, csb) = if $b_t { (1, $k as isize) } else { ($n as isize, 1) };
        (rsa, csa, rsb, csb)
    }};
}

macro_rules! impl_real {
    ($t:ty, $prec:expr, $gemm:path) => {
        impl Real for $t {
            const PRECISION: Precision = $prec;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa, rsb, csb) = gemm_strides!(m, k, n, a_t, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every index the strides can
                // reach, and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
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
        }
    };
}

impl_real!(f32, Precision::Single, matrixmultiply::sgemm);
impl_real!(f64, Precision::Double, matrixmultiply::dgemm);

/// `(N, C, H, W)` extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial positions per channel, `H * W`.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Merged per-sample dimension `D = C * H * W`.
    pub fn merged(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Inverse of [`Shape4::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize, usize) {
        let w = index % self.w;
        let rest = index / self.w;
        let h = rest % self.h;
        let rest = rest / self.h;
        (rest / self.c, rest % self.c, h, w)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_batch(&self, n: usize) -> Self {
        Self { n, ..*self }
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array in NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "buffer of length {} cannot hold shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.shape.index(n, c, h, w);
        &mut self.data[i]
    }

    /// Contiguous `(C, H, W)` block of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let d = self.shape.merged();
        &self.data[n * d..(n + 1) * d]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let d = self.shape.merged();
        &mut self.data[n * d..(n + 1) * d]
    }

    /// Copies samples `start..end` into a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.shape.n {
            return Err(Error::ShapeMismatch(format!(
                "batch slice {start}..{end} out of range for {}",
                self.shape
            )));
        }
        let d = self.shape.merged();
        Ok(Self {
            shape: self.shape.with_batch(end - start),
            data: self.data[start * d..end * d].to_vec(),
        })
    }

    /// Gathers the listed samples, in order, into a new tensor.
    pub fn gather_batch(&self, samples: &[usize]) -> Result<Self> {
        let d = self.shape.merged();
        let mut data = Vec::with_capacity(samples.len() * d);
        for &s in samples {
            if s >= self.shape.n {
                return Err(Error::IndexOutOfBounds {
                    index: s,
                    len: self.shape.n,
                });
            }
            data.extend_from_slice(self.sample(s));
        }
        Ok(Self {
            shape: self.shape.with_batch(samples.len()),
            data,
        })
    }

    /// Concatenates tensors with equal `(C, H, W)` along the batch axis.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("nothing to concatenate".into()))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch(format!(
                    "cannot concatenate {} with {}",
                    first, p.shape
                )));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: first.with_batch(n),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise `|self - other|`, or an error when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Sequential double-precision sum over all elements in storage order.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v.to_f64())
    }
}

/// Row-major 2-D matrix, used for classifier weights and logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
}

/// Mean of `x` over the listed flat indices, accumulated in `f64` in the
/// order given.
pub fn reduce_mean<T: Real>(x: &Tensor4<T>, group: &[usize]) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let data = x.data();
    let mut acc = 0.0f64;
    for &i in group {
        let v = data.get(i).ok_or(Error::IndexOutOfBounds {
            index: i,
            len: data.len(),
        })?;
        acc += v.to_f64();
    }
    Ok(acc / group.len() as f64)
}

/// Biased variance of `x` over `group` about `mean`: divides by the group
/// size, not size - 1.
pub fn reduce_var<T: Real>(x: &Tensor4<T>, group: &[usize], mean: f64) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let data = x.data();
    let mut acc = 0.0f64;
    for &i in group {
        let v = data.get(i).ok_or(Error::IndexOutOfBounds {
            index: i,
            len: data.len(),
        })?;
        let d = v.to_f64() - mean;
        acc += d * d;
    }
    Ok(acc / group.len() as f64)
}
