//! Dense row-major tensors.
//!
//! Elementwise kernels run in the tensor's own precision. Reductions (dot,
//! sums, norms, batch statistics) accumulate in `f64` and round once.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{invalid, Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (the working
/// precision) and `f64` (shadow precision for gradient checks).
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c[m,n] += a[m,k] * b[k,n]` with explicit row/column strides.
    /// Callers guarantee every strided index stays inside its slice.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        c: &mut [Self],
        sc: (isize, isize),
    );
}

fn span(rows: usize, cols: usize, s: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        ((rows - 1) as isize * s.0 + (cols - 1) as isize * s.1) as usize + 1
    }
}

macro_rules! gemm_impl {
    ($f:ident) => {
        #[allow(clippy::too_many_arguments)]
        fn gemm_acc(
            m: usize,
            k: usize,
            n: usize,
            a: &[Self],
            sa: (isize, isize),
            b: &[Self],
            sb: (isize, isize),
            c: &mut [Self],
            sc: (isize, isize),
        ) {
            assert!(
                a.len() >= span(m, k, sa) && b.len() >= span(k, n, sb) && c.len() >= span(m, n, sc)
            );
            // SAFETY: the assert above bounds every strided access.
            unsafe {
                matrixmultiply::$f(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    sa.0,
                    sa.1,
                    b.as_ptr(),
                    sb.0,
                    sb.1,
                    1.0,
                    c.as_mut_ptr(),
                    sc.0,
                    sc.1,
                )
            }
        }
    };
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    gemm_impl!(sgemm);
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    gemm_impl!(dgemm);
}

/// Dense n-dimensional array. `data.len()` always equals the product of
/// `shape`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..SHOWN])
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    /// Zeros with the shape of `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Converts element precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(op, &self.shape, &other.shape)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        same_shape("add_assign", &self.shape, &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        same_shape("axpy", &self.shape, &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Inner product over flattened elements; requires equal element counts.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(T::from_f64(dot_f64(&self.data, &other.data)))
    }

    pub fn norm2(&self) -> T {
        T::from_f64(dot_f64(&self.data, &self.data).sqrt())
    }

    pub fn sum(&self) -> T {
        T::from_f64(self.data.iter().map(|v| v.as_f64()).sum())
    }

    pub fn mean(&self) -> T {
        T::from_f64(self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Sums over `axis`, removing it. A rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(invalid(
                "sum_axis",
                format!("axis {axis} out of range for rank {}", self.rank()),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut acc = vec![0f64; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    acc[o * inner + i] += self.data[base + i].as_f64();
                }
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Self {
            shape,
            data: acc.into_iter().map(T::from_f64).collect(),
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let n = *self
            .shape
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", "axis out of range"))?;
        Ok(self.sum_axis(axis)?.scale(T::from_f64(1.0 / n as f64)))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        crate::kernels::gemm(m, k, n, &self.data, &other.data, &mut out);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(invalid(
                "transpose",
                format!("rank-2 tensor required, got {:?}", self.shape),
            ));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Reverses the last axis (horizontal flip for NCHW images).
    pub fn flip_last_axis(&self) -> Self {
        let w = *self.shape.last().expect("tensor has at least one axis");
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(w) {
            row.reverse();
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and every element.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Slices `count` entries starting at `start` along axis 0.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let n = self.shape[0];
        if count == 0 || start + count > n {
            return Err(invalid(
                "slice_batch",
                format!("range {start}..{} outside batch of {n}", start + count),
            ));
        }
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self {
            shape,
            data: self.data[start * per..(start + count) * per].to_vec(),
        })
    }

    /// Concatenates along `axis`. All other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(invalid("concat", "axis out of range"));
        }
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_mid: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_mid * inner);
        for o in 0..outer {
            for p in parts {
                let blk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_mid;
        Ok(Self { shape, data })
    }
}

/// `f64`-accumulated inner product.
pub(crate) fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.as_f64() * y.as_f64())
        .sum()
}
