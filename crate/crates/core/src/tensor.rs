//! Dense rank-4 tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense rank-4 array stored row-major over `dims`.
///
/// Used for activations (batch × channels × height × width), convolution
/// kernels (filters × channels × K × K) and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match dims {:?} ({} elements)",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, n1, n2, n3] = self.dims;
        ((idx[0] * n1 + idx[1]) * n2 + idx[2]) * n3 + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Same data viewed under different dims with equal element count.
    pub fn reshape(mut self, dims: [usize; 4]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.dims, dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_dims(other.dims, "zip_map")?;
        Ok(Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_dims(other.dims, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sum of elementwise products, accumulated left to right.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_dims(other.dims, "dot")?;
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn norm(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type (e.g. f32 storage to f64 for checks).
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.as_f64()).expect("castable"))
                .collect(),
        }
    }

    /// Copies rows `[start, end)` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let stride: usize = self.dims[1..].iter().product();
        Tensor4 {
            dims: [end - start, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[start * stride..end * stride].to_vec(),
        }
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn gather_batch(&self, rows: &[usize]) -> Self {
        let stride: usize = self.dims[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        Tensor4 {
            dims: [rows.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        }
    }

    /// Concatenates along the leading axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let tail = [first.dims[1], first.dims[2], first.dims[3]];
        let mut data = Vec::new();
        let mut n0 = 0;
        for p in parts {
            if p.dims[1..] != tail {
                return Err(Error::shape(format!(
                    "concat: trailing dims {:?} vs {:?}",
                    &p.dims[1..],
                    tail
                )));
            }
            n0 += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            dims: [n0, tail[0], tail[1], tail[2]],
            data,
        })
    }

    pub(crate) fn expect_dims(&self, dims: [usize; 4], what: &str) -> Result<()> {
        if self.dims != dims {
            return Err(Error::shape(format!(
                "{what}: expected dims {:?}, got {:?}",
                dims, self.dims
            )));
        }
        Ok(())
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("{what}: non-finite value")))
        }
    }
}

/// Largest elementwise relative error `|a-b| / max(|a|,|b|,floor)`.
pub fn max_rel_err<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, floor: f64) -> f64 {
    assert_eq!(a.dims(), b.dims(), "max_rel_err dims");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
