//! Center-decoupled convolution kernels.
//!
//! A `K×K` kernel `W` (odd `K`, padding `(K-1)/2`) is rewritten as a frozen
//! surround kernel `Wθ`, equal to `W` with the center tap zeroed, plus a
//! trainable `1×1` branch `Wα` holding the center taps. The branch reads the
//! input subsampled at the stride so that its taps line up with the center
//! taps of the full kernel, which makes
//!
//! ```text
//! conv(X, W) = conv(X, Wθ) + conv(X_sub, Wα)
//! ```
//!
//! hold exactly for every stride. Gradients of the branch only touch `Wα`,
//! and only on the selected channels.

use std::path::Path;

use crate::conv::{conv2d_backward_input, conv2d_forward, ConvGeometry};
use crate::dces::ChannelSelection;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;
use crate::tsr;

/// 0-based index of the center tap of an odd kernel.
#[inline]
pub fn center_index(k: usize) -> usize {
    (k - 1) / 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelDecomposition<T> {
    layer: usize,
    w_theta: Tensor4<T>,
    w_alpha: Tensor4<T>,
    geom: ConvGeometry,
}

fn check_alignment(k_h: usize, k_w: usize, geom: ConvGeometry) -> Result<()> {
    if k_h != k_w || k_h.is_multiple_of(2) {
        return Err(Error::arg(format!(
            "center undefined for a {k_h}×{k_w} kernel (need odd square K)"
        )));
    }
    if geom.stride == 0 {
        return Err(Error::arg("stride must be positive"));
    }
    if geom.padding != (k_h - 1) / 2 {
        return Err(Error::arg(format!(
            "alignment: padding {} must equal (K-1)/2 = {}",
            geom.padding,
            (k_h - 1) / 2
        )));
    }
    Ok(())
}

/// Splits `w` into surround and center parts. `w` is not modified.
pub fn decouple<T: Scalar>(w: &Tensor4<T>, geom: ConvGeometry) -> Result<KernelDecomposition<T>> {
    let [nd, nc, kh, kw] = w.dims();
    check_alignment(kh, kw, geom)?;
    let m = center_index(kh);
    let mut w_theta = w.clone();
    let mut alpha = Vec::with_capacity(nd * nc);
    for d in 0..nd {
        for c in 0..nc {
            alpha.push(w.at([d, c, m, m]));
            w_theta.set([d, c, m, m], T::zero());
        }
    }
    Ok(KernelDecomposition {
        layer: 0,
        w_theta,
        w_alpha: Tensor4::from_vec([nd, nc, 1, 1], alpha)?,
        geom,
    })
}

/// Writes the center branch back into the surround kernel.
pub fn fuse<T: Scalar>(dec: &KernelDecomposition<T>) -> Result<Tensor4<T>> {
    dec.validate()?;
    let [nd, nc, k, _] = dec.w_theta.dims();
    let m = center_index(k);
    let mut w = dec.w_theta.clone();
    for d in 0..nd {
        for c in 0..nc {
            w.set([d, c, m, m], dec.w_alpha.at([d, c, 0, 0]));
        }
    }
    Ok(w)
}

impl<T: Scalar> KernelDecomposition<T> {
    /// Assembles a decomposition from its parts, checking every invariant.
    pub fn from_parts(
        layer: usize,
        w_theta: Tensor4<T>,
        w_alpha: Tensor4<T>,
        geom: ConvGeometry,
    ) -> Result<Self> {
        let dec = KernelDecomposition {
            layer,
            w_theta,
            w_alpha,
            geom,
        };
        dec.validate()?;
        Ok(dec)
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn w_theta(&self) -> &Tensor4<T> {
        &self.w_theta
    }

    pub fn w_alpha(&self) -> &Tensor4<T> {
        &self.w_alpha
    }

    /// Mutable access to the trainable center branch.
    pub fn w_alpha_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.w_alpha
    }

    pub fn kernel_size(&self) -> usize {
        self.w_theta.dims()[2]
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn filters(&self) -> usize {
        self.w_theta.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.w_theta.dims()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let [nd, nc, kh, kw] = self.w_theta.dims();
        check_alignment(kh, kw, self.geom)?;
        if self.w_alpha.dims() != [nd, nc, 1, 1] {
            return Err(Error::State(format!(
                "center branch dims {:?} do not match surround {:?}",
                self.w_alpha.dims(),
                self.w_theta.dims()
            )));
        }
        let m = center_index(kh);
        for d in 0..nd {
            for c in 0..nc {
                if self.w_theta.at([d, c, m, m]) != T::zero() {
                    return Err(Error::State(format!(
                        "surround kernel has nonzero center at filter {d}, channel {c}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Persists as `wtheta_<layer>.tsr` and `walpha_<layer>.tsr`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        tsr::write_tensor(dir.join(format!("wtheta_{}.tsr", self.layer)), &self.w_theta)?;
        tsr::write_tensor(dir.join(format!("walpha_{}.tsr", self.layer)), &self.w_alpha)
    }

    pub fn load(dir: impl AsRef<Path>, layer: usize, geom: ConvGeometry) -> Result<Self> {
        let dir = dir.as_ref();
        let w_theta = tsr::read_tensor(dir.join(format!("wtheta_{layer}.tsr")))?;
        let w_alpha = tsr::read_tensor(dir.join(format!("walpha_{layer}.tsr")))?;
        Self::from_parts(layer, w_theta, w_alpha, geom)
    }
}

/// Input to the center branch: `X_sub[b,c,u,v] = X[b,c,u·σ,v·σ]`.
pub fn branch_input<T: Scalar>(x: &Tensor4<T>, stride: usize) -> Tensor4<T> {
    let [nb, nc, h, w] = x.dims();
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    if stride == 1 {
        return x.clone();
    }
    Tensor4::from_fn([nb, nc, oh, ow], |[b, c, u, v]| x.at([b, c, u * stride, v * stride]))
}

/// Saved input of the center branch.
#[derive(Debug, Clone)]
pub struct BranchCache<T> {
    pub x_sub: Tensor4<T>,
}

/// Surround convolution plus the independent `1×1` center branch.
pub fn decoupled_forward<T: Scalar>(
    x: &Tensor4<T>,
    dec: &KernelDecomposition<T>,
) -> Result<(Tensor4<T>, BranchCache<T>)> {
    if x.dims()[1] != dec.channels() {
        return Err(Error::shape(format!(
            "input has {} channels, decomposition expects {}",
            x.dims()[1],
            dec.channels()
        )));
    }
    let mut y = conv2d_forward(x, &dec.w_theta, dec.geom)?;
    let x_sub = branch_input(x, dec.geom.stride);
    let branch = conv2d_forward(&x_sub, &dec.w_alpha, ConvGeometry::new(1, 0))?;
    y.add_assign(&branch)?;
    Ok((y, BranchCache { x_sub }))
}

/// Center-branch gradient holding only the selected channels.
///
/// `values` is row-major `[filter][selected channel]`, so exactly
/// `D · |selected|` values are materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterGrad<T> {
    pub filters: usize,
    pub channels: usize,
    pub selected: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> CenterGrad<T> {
    pub fn materialized(&self) -> usize {
        self.values.len()
    }

    /// Expands to `[D, C, 1, 1]` with structural zeros on unselected channels.
    pub fn to_dense(&self) -> Tensor4<T> {
        let mut g = Tensor4::zeros([self.filters, self.channels, 1, 1]);
        let k = self.selected.len();
        for d in 0..self.filters {
            for (j, &c) in self.selected.iter().enumerate() {
                g.set([d, c, 0, 0], self.values[d * k + j]);
            }
        }
        g
    }

    /// Restricts a dense `[D, C, 1, 1]` gradient to `selected`.
    pub fn from_dense(g: &Tensor4<T>, selected: &[usize]) -> Self {
        let [nd, nc, _, _] = g.dims();
        let mut values = Vec::with_capacity(nd * selected.len());
        for d in 0..nd {
            for &c in selected {
                values.push(g.at([d, c, 0, 0]));
            }
        }
        CenterGrad {
            filters: nd,
            channels: nc,
            selected: selected.to_vec(),
            values,
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.selected != other.selected || self.filters != other.filters {
            return Err(Error::shape("center gradients over different selections"));
        }
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

/// `Gα[d,c] = Σ_{b,u,v} X_sub[b,c,u,v] · Gy[b,d,u,v]` on selected channels.
pub fn center_backward_compact<T: Scalar>(
    cache: &BranchCache<T>,
    gy: &Tensor4<T>,
    selection: &ChannelSelection,
) -> Result<CenterGrad<T>> {
    let [nb, nc, oh, ow] = cache.x_sub.dims();
    let [gb, nd, gh, gw] = gy.dims();
    if gb != nb || gh != oh || gw != ow {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match branch input {:?}",
            gy.dims(),
            cache.x_sub.dims()
        )));
    }
    if let Some(&bad) = selection.selected().iter().find(|&&c| c >= nc) {
        return Err(Error::arg(format!("selected channel {bad} out of range (C = {nc})")));
    }
    let plane = oh * ow;
    let (xs, gs) = (cache.x_sub.data(), gy.data());
    let mut values = Vec::with_capacity(nd * selection.len());
    for d in 0..nd {
        for &c in selection.selected() {
            let mut acc = T::zero();
            for b in 0..nb {
                let xo = (b * nc + c) * plane;
                let go = (b * nd + d) * plane;
                for p in 0..plane {
                    acc += xs[xo + p] * gs[go + p];
                }
            }
            values.push(acc);
        }
    }
    Ok(CenterGrad {
        filters: nd,
        channels: nc,
        selected: selection.selected().to_vec(),
        values,
    })
}

/// Dense `[D, C, 1, 1]` form of [`center_backward_compact`].
pub fn center_backward<T: Scalar>(
    cache: &BranchCache<T>,
    gy: &Tensor4<T>,
    selection: &ChannelSelection,
) -> Result<Tensor4<T>> {
    Ok(center_backward_compact(cache, gy, selection)?.to_dense())
}

/// Input gradient through both branches.
pub fn decoupled_backward_input<T: Scalar>(
    x_dims: [usize; 4],
    dec: &KernelDecomposition<T>,
    gy: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let mut gx = conv2d_backward_input(x_dims, &dec.w_theta, gy, dec.geom)?;
    let [nb, nc, _, _] = x_dims;
    let [_, nd, oh, ow] = gy.dims();
    let s = dec.geom.stride;
    let (ws, gs) = (dec.w_alpha.data(), gy.data());
    for b in 0..nb {
        for c in 0..nc {
            for u in 0..oh {
                for v in 0..ow {
                    let mut acc = T::zero();
                    for d in 0..nd {
                        acc += ws[d * nc + c] * gs[((b * nd + d) * oh + u) * ow + v];
                    }
                    let idx = [b, c, u * s, v * s];
                    let cur = gx.at(idx);
                    gx.set(idx, cur + acc);
                }
            }
        }
    }
    Ok(gx)
}
