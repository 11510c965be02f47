//! Sparse orthogonal gradient projection.
//!
//! A running uncentered covariance of each decoupled layer's branch input is
//! kept over all channels. For a task, only the principal submatrix on the
//! selected channels is eigendecomposed, so the eigensolver workspace is
//! `(sC)²` rather than `C²`. Center-branch gradients are projected onto the
//! low-energy eigenvectors of that submatrix, which leaves the responses to
//! previously seen inputs (nearly) unchanged.

use std::path::Path;

use crate::csko::CenterGrad;
use crate::dces::ChannelSelection;
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eig, Matrix, SymMatrix};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;
use crate::tsr::TsrArray;

/// Default energy fraction protected by the projection.
pub const DEFAULT_RHO: f64 = 0.97;

/// Matrices held while extracting a null space: the covariance submatrix and
/// the eigenvector matrix.
pub const WORKSPACE_MATRICES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCovariance<T> {
    pub layer: usize,
    m: SymMatrix<T>,
    samples: u64,
}

impl<T: Scalar> FeatureCovariance<T> {
    pub fn new(layer: usize, channels: usize) -> Self {
        FeatureCovariance {
            layer,
            m: SymMatrix::zeros(channels),
            samples: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.m.dim()
    }

    pub fn matrix(&self) -> &SymMatrix<T> {
        &self.m
    }

    pub fn sample_count(&self) -> u64 {
        self.samples
    }

    /// Folds in every spatial position of every batch item of `x_sub` as one
    /// sample vector in `R^C`: `M ← (n·M + Σ x xᵀ) / (n + N)`.
    pub fn accumulate(&mut self, x_sub: &Tensor4<T>) -> Result<()> {
        let [nb, nc, h, w] = x_sub.dims();
        if nc != self.channels() {
            return Err(Error::shape(format!(
                "covariance over {} channels fed {nc}-channel features",
                self.channels()
            )));
        }
        x_sub.check_finite("accumulate_covariance")?;
        let plane = h * w;
        let added = (nb * plane) as u64;
        if added == 0 {
            return Ok(());
        }
        let xs = x_sub.data();
        let n_old = T::lit(self.samples as f64);
        let n_new = T::lit((self.samples + added) as f64);
        for i in 0..nc {
            for j in i..nc {
                let mut acc = T::zero();
                for b in 0..nb {
                    let (xi, xj) = ((b * nc + i) * plane, (b * nc + j) * plane);
                    for p in 0..plane {
                        acc += xs[xi + p] * xs[xj + p];
                    }
                }
                let v = (n_old * self.m.get(i, j) + acc) / n_new;
                self.m.set(i, j, v);
            }
        }
        self.samples += added;
        Ok(())
    }

    /// Persists the matrix as `cov_<layer>.tsr`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        TsrArray::from_matrix(&self.m.to_matrix())
            .write(dir.as_ref().join(format!("cov_{}.tsr", self.layer)))
    }
}

/// Orthonormal basis of the approximate null space of a covariance
/// submatrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSpaceBasis<T> {
    pub layer: usize,
    /// Total channel count of the layer.
    pub total_channels: usize,
    /// Channels spanned by the submatrix, ascending.
    pub channels: Vec<usize>,
    /// `(sC) × r` orthonormal columns.
    pub u0: Matrix<T>,
    pub rho: f64,
    /// Upper bound on `‖M̃·U0‖_F` fixed at construction.
    pub residual_bound: f64,
    /// Scalar values held by the eigensolver workspace.
    pub workspace_values: usize,
}

impl<T: Scalar> NullSpaceBasis<T> {
    pub fn rank(&self) -> usize {
        self.u0.cols()
    }

    /// Persists `U0` as `u0_<layer>_task<t>.tsr`.
    pub fn save(&self, dir: impl AsRef<Path>, task: usize) -> Result<()> {
        TsrArray::from_matrix(&self.u0)
            .write(dir.as_ref().join(format!("u0_{}_task{task}.tsr", self.layer)))
    }

    fn project_row(&self, g: &[T], out: &mut [T]) {
        let (k, r) = (self.u0.rows(), self.u0.cols());
        let mut coef = vec![T::zero(); r];
        for (j, cj) in coef.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (i, &gi) in g.iter().enumerate().take(k) {
                acc += self.u0.get(i, j) * gi;
            }
            *cj = acc;
        }
        for (i, o) in out.iter_mut().enumerate().take(k) {
            let mut acc = T::zero();
            for (j, &cj) in coef.iter().enumerate() {
                acc += self.u0.get(i, j) * cj;
            }
            *o = acc;
        }
    }
}

/// Eigenvalue slack below which a direction still counts as null.
fn null_slack<T: Scalar>(dim: usize) -> f64 {
    (T::epsilon().as_f64() * 4.0 * dim.max(1) as f64).max(1e-8)
}

/// Null space of the selected-channel principal submatrix: the eigenvectors
/// of the smallest eigenvalues whose cumulative sum stays within
/// `(1 − rho)·trace`.
pub fn compute_null_space<T: Scalar>(
    cov: &FeatureCovariance<T>,
    selection: &ChannelSelection,
    rho: f64,
) -> Result<NullSpaceBasis<T>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::arg(format!("rho must lie in (0, 1], got {rho}")));
    }
    if selection.is_empty() {
        return Err(Error::arg("empty channel selection"));
    }
    if selection.channels() != cov.channels() {
        return Err(Error::shape(format!(
            "selection over {} channels, covariance over {}",
            selection.channels(),
            cov.channels()
        )));
    }
    let sub = cov.m.principal_submatrix(selection.selected())?;
    let k = sub.dim();
    let eig = symmetric_eig(&sub)?;
    let trace = sub.trace().as_f64().max(0.0);
    let budget = (1.0 - rho) * trace + null_slack::<T>(k) * trace;
    let mut cum = 0.0;
    let mut keep = 0;
    for &lambda in &eig.values {
        let next = cum + lambda.as_f64().max(0.0);
        if next > budget {
            break;
        }
        cum = next;
        keep += 1;
    }
    let cols: Vec<usize> = (0..keep).collect();
    Ok(NullSpaceBasis {
        layer: cov.layer,
        total_channels: cov.channels(),
        channels: selection.selected().to_vec(),
        u0: eig.vectors.select_columns(&cols),
        rho,
        residual_bound: cum,
        workspace_values: WORKSPACE_MATRICES * k * k,
    })
}

/// Replaces each filter's gradient row on the basis channels by `U0 U0ᵀ g`.
/// Channels outside the basis are zeroed.
pub fn project_gradient<T: Scalar>(g: &Tensor4<T>, basis: &NullSpaceBasis<T>) -> Result<Tensor4<T>> {
    let [nd, nc, kh, kw] = g.dims();
    if nc != basis.total_channels || kh != 1 || kw != 1 {
        return Err(Error::shape(format!(
            "gradient {:?} does not match a {}-channel center branch",
            g.dims(),
            basis.total_channels
        )));
    }
    let k = basis.channels.len();
    let mut out = Tensor4::zeros(g.dims());
    let mut row = vec![T::zero(); k];
    let mut proj = vec![T::zero(); k];
    for d in 0..nd {
        for (j, &c) in basis.channels.iter().enumerate() {
            row[j] = g.at([d, c, 0, 0]);
        }
        basis.project_row(&row, &mut proj);
        for (j, &c) in basis.channels.iter().enumerate() {
            out.set([d, c, 0, 0], proj[j]);
        }
    }
    Ok(out)
}

/// In-place projection of a compact center gradient.
pub fn project_center<T: Scalar>(g: &mut CenterGrad<T>, basis: &NullSpaceBasis<T>) -> Result<()> {
    if g.selected != basis.channels || g.channels != basis.total_channels {
        return Err(Error::shape(
            "center gradient selection differs from the null-space channels",
        ));
    }
    let k = g.selected.len();
    let mut proj = vec![T::zero(); k];
    for d in 0..g.filters {
        let row = &mut g.values[d * k..(d + 1) * k];
        basis.project_row(row, &mut proj);
        row.copy_from_slice(&proj);
    }
    Ok(())
}
