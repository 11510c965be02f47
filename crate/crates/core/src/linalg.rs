//! Small dense matrices and the cyclic Jacobi symmetric eigensolver.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}×{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}×{} by {}×{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.cols, |i, j| {
            let mut acc = T::zero();
            for k in 0..self.cols {
                acc += self.get(i, k) * other.get(k, j);
            }
            acc
        }))
    }

    pub fn frobenius(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }

    /// Selected columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Matrix::from_fn(self.rows, cols.len(), |i, j| self.get(i, cols[j]))
    }
}

/// Symmetric matrix, stored in full with both triangles kept identical.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> SymMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    /// Builds from a square matrix, storing `(A + Aᵀ)/2`.
    pub fn symmetrized(m: &Matrix<T>) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::shape(format!("{}×{} is not square", m.rows(), m.cols())));
        }
        let n = m.rows();
        let half = T::lit(0.5);
        let mut s = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = if i == j {
                    m.get(i, i)
                } else {
                    (m.get(i, j) + m.get(j, i)) * half
                };
                s.set(i, j, v);
            }
        }
        Ok(s)
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut s = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            s.set(i, i, d);
        }
        s
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    /// Writes both `(i,j)` and `(j,i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn trace(&self) -> T {
        (0..self.n).fold(T::zero(), |acc, i| acc + self.get(i, i))
    }

    pub fn frobenius(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix {
            rows: self.n,
            cols: self.n,
            data: self.data.clone(),
        }
    }

    /// Principal submatrix on `idx` (rows and columns in the given order).
    pub fn principal_submatrix(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n) {
            return Err(Error::arg(format!("index {bad} out of range for dim {}", self.n)));
        }
        let k = idx.len();
        let mut data = Vec::with_capacity(k * k);
        for &i in idx {
            for &j in idx {
                data.push(self.get(i, j));
            }
        }
        Ok(SymMatrix { n: k, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Eigenvalues in ascending order with matching orthonormal eigenvector
/// columns.
#[derive(Debug, Clone)]
pub struct SymEigen<T> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
    pub sweeps: usize,
}

pub const MAX_SWEEPS: usize = 100;

/// Off-diagonal convergence tolerance relative to `‖M‖_F`.
///
/// `1e-10` in double precision; single precision cannot resolve that, so the
/// threshold is floored at a small multiple of the type's epsilon.
pub fn jacobi_tolerance<T: Scalar>() -> f64 {
    (8.0 * T::epsilon().as_f64()).max(1e-10)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn symmetric_eig<T: Scalar>(m: &SymMatrix<T>) -> Result<SymEigen<T>> {
    if !m.all_finite() {
        return Err(Error::Numerical("symmetric_eig: non-finite entry".into()));
    }
    let n = m.dim();
    let mut a = m.data().to_vec();
    let mut v = Matrix::<T>::identity(n);
    let tol = T::lit(jacobi_tolerance::<T>()) * m.frobenius();
    let off_norm = |a: &[T]| {
        let mut acc = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                acc += a[p * n + q] * a[p * n + q];
            }
        }
        (acc + acc).sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off <= tol {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::Convergence {
                sweeps,
                off_norm: off.as_f64(),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (apq + apq);
                let t = {
                    let denom = theta.abs() + (theta * theta + T::one()).sqrt();
                    if theta >= T::zero() {
                        T::one() / denom
                    } else {
                        -T::one() / denom
                    }
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J = [[c, s], [-s, c]] on (p, q).
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = T::zero();
                a[q * n + p] = T::zero();
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[i * n + i]
            .partial_cmp(&a[j * n + j])
            .expect("finite eigenvalues")
            .then(i.cmp(&j))
    });
    Ok(SymEigen {
        values: order.iter().map(|&i| a[i * n + i]).collect(),
        vectors: v.select_columns(&order),
        sweeps,
    })
}
