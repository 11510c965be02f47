//! Direct 2-D cross-correlation with zero padding and its exact adjoints.
//!
//! All reductions run in a fixed nested-loop order so results are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Stride and zero padding shared by a convolution and its adjoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }

    /// Output extent along one spatial axis.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::arg("stride must be positive"));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::shape(format!(
                "padded input extent {padded} smaller than kernel {kernel}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    fn output_dims(&self, x: [usize; 4], w: [usize; 4]) -> Result<[usize; 4]> {
        if self.stride == 0 {
            return Err(Error::arg("stride must be positive"));
        }
        if x[1] != w[1] {
            return Err(Error::shape(format!(
                "input has {} channels, kernel expects {}",
                x[1], w[1]
            )));
        }
        Ok([
            x[0],
            w[0],
            self.out_extent(x[2], w[2])?,
            self.out_extent(x[3], w[3])?,
        ])
    }

    /// Range of kernel taps `i` whose input row `u*stride + i - padding`
    /// falls inside `[0, extent)`.
    #[inline]
    fn valid_taps(&self, out_pos: usize, kernel: usize, extent: usize) -> (usize, usize) {
        let base = out_pos * self.stride;
        let lo = self.padding.saturating_sub(base);
        let hi = (extent + self.padding).saturating_sub(base).min(kernel);
        (lo, hi.max(lo))
    }
}

/// `Y[b,d,u,v] = Σ_{c,i,j} Xpad[b,c,u·s+i,v·s+j] · W[d,c,i,j]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    geom: ConvGeometry,
) -> Result<Tensor4<T>> {
    let [nb, nc, h, wd] = x.dims();
    let [nd, _, kh, kw] = w.dims();
    let ydims = geom.output_dims(x.dims(), w.dims())?;
    let [_, _, oh, ow] = ydims;
    let (xs, ws) = (x.data(), w.data());
    let mut y = Vec::with_capacity(ydims.iter().product());
    for b in 0..nb {
        for d in 0..nd {
            for u in 0..oh {
                let (i0, i1) = geom.valid_taps(u, kh, h);
                for v in 0..ow {
                    let (j0, j1) = geom.valid_taps(v, kw, wd);
                    let mut acc = T::zero();
                    for c in 0..nc {
                        let xbase = (b * nc + c) * h;
                        let wbase = (d * nc + c) * kh;
                        for i in i0..i1 {
                            let row = u * geom.stride + i - geom.padding;
                            let xrow = (xbase + row) * wd;
                            let wrow = (wbase + i) * kw;
                            for j in j0..j1 {
                                let col = v * geom.stride + j - geom.padding;
                                acc += xs[xrow + col] * ws[wrow + j];
                            }
                        }
                    }
                    y.push(acc);
                }
            }
        }
    }
    Tensor4::from_vec(ydims, y)
}

fn check_cotangent<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    gy: &Tensor4<T>,
    geom: ConvGeometry,
) -> Result<()> {
    let ydims = geom.output_dims(x.dims(), w.dims())?;
    gy.expect_dims(ydims, "conv2d_backward output gradient")
}

/// Gradient of `Σ(Y ⊙ Gy)` with respect to the input.
pub fn conv2d_backward_input<T: Scalar>(
    x_dims: [usize; 4],
    w: &Tensor4<T>,
    gy: &Tensor4<T>,
    geom: ConvGeometry,
) -> Result<Tensor4<T>> {
    let ydims = geom.output_dims(x_dims, w.dims())?;
    gy.expect_dims(ydims, "conv2d_backward_input output gradient")?;
    let [nb, nc, h, wd] = x_dims;
    let [nd, _, kh, kw] = w.dims();
    let [_, _, oh, ow] = ydims;
    let (ws, gs) = (w.data(), gy.data());
    let mut gx = Tensor4::zeros(x_dims);
    let gxs = gx.data_mut();
    for b in 0..nb {
        for d in 0..nd {
            for u in 0..oh {
                let (i0, i1) = geom.valid_taps(u, kh, h);
                for v in 0..ow {
                    let (j0, j1) = geom.valid_taps(v, kw, wd);
                    let g = gs[((b * nd + d) * oh + u) * ow + v];
                    if g == T::zero() {
                        continue;
                    }
                    for c in 0..nc {
                        let xbase = (b * nc + c) * h;
                        let wbase = (d * nc + c) * kh;
                        for i in i0..i1 {
                            let row = u * geom.stride + i - geom.padding;
                            let xrow = (xbase + row) * wd;
                            let wrow = (wbase + i) * kw;
                            for j in j0..j1 {
                                let col = v * geom.stride + j - geom.padding;
                                gxs[xrow + col] += ws[wrow + j] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Gradient of `Σ(Y ⊙ Gy)` with respect to the kernel.
pub fn conv2d_backward_weight<T: Scalar>(
    x: &Tensor4<T>,
    w_dims: [usize; 4],
    gy: &Tensor4<T>,
    geom: ConvGeometry,
) -> Result<Tensor4<T>> {
    let ydims = geom.output_dims(x.dims(), w_dims)?;
    gy.expect_dims(ydims, "conv2d_backward_weight output gradient")?;
    let [nb, nc, h, wd] = x.dims();
    let [nd, _, kh, kw] = w_dims;
    let [_, _, oh, ow] = ydims;
    let (xs, gs) = (x.data(), gy.data());
    let mut gw = Vec::with_capacity(w_dims.iter().product());
    for d in 0..nd {
        for c in 0..nc {
            for i in 0..kh {
                for j in 0..kw {
                    let mut acc = T::zero();
                    for b in 0..nb {
                        let xbase = (b * nc + c) * h;
                        let gbase = (b * nd + d) * oh;
                        for u in 0..oh {
                            let row = u * geom.stride + i;
                            if row < geom.padding || row - geom.padding >= h {
                                continue;
                            }
                            let xrow = (xbase + row - geom.padding) * wd;
                            let grow = (gbase + u) * ow;
                            for v in 0..ow {
                                let col = v * geom.stride + j;
                                if col < geom.padding || col - geom.padding >= wd {
                                    continue;
                                }
                                acc += xs[xrow + col - geom.padding] * gs[grow + v];
                            }
                        }
                    }
                    gw.push(acc);
                }
            }
        }
    }
    Tensor4::from_vec(w_dims, gw)
}

/// Both adjoints of [`conv2d_forward`]: `(Gx, Gw)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    gy: &Tensor4<T>,
    geom: ConvGeometry,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check_cotangent(x, w, gy, geom)?;
    let gx = conv2d_backward_input(x.dims(), w, gy, geom)?;
    let gw = conv2d_backward_weight(x, w.dims(), gy, geom)?;
    Ok((gx, gw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::max_rel_err;

    /// Independent direct summation with explicit bounds tests on a padded
    /// copy of the input.
    fn oracle_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, s: usize, p: usize) -> Tensor4<f64> {
        let [nb, nc, h, wd] = x.dims();
        let [nd, _, k, _] = w.dims();
        let (ph, pw) = (h + 2 * p, wd + 2 * p);
        let mut xp = vec![0.0; nb * nc * ph * pw];
        for b in 0..nb {
            for c in 0..nc {
                for r in 0..h {
                    for q in 0..wd {
                        xp[((b * nc + c) * ph + r + p) * pw + q + p] = x.at([b, c, r, q]);
                    }
                }
            }
        }
        let oh = (ph - k) / s + 1;
        let ow = (pw - k) / s + 1;
        Tensor4::from_fn([nb, nd, oh, ow], |[b, d, u, v]| {
            let mut acc = 0.0;
            for c in 0..nc {
                for i in 0..k {
                    for j in 0..k {
                        acc += xp[((b * nc + c) * ph + u * s + i) * pw + v * s + j] * w.at([d, c, i, j]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = SeededRng::new(1);
        let x = rng.normal_tensor::<f32>([1, 1, 4, 4], 1.0);
        let w = Tensor4::from_fn([1, 1, 3, 3], |[_, _, i, j]| if i == 1 && j == 1 { 1.0 } else { 0.0 });
        let y = conv2d_forward(&x, &w, ConvGeometry::new(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor4::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor4::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_forward(&x, &w, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn strided_padded_matches_oracle() {
        let mut rng = SeededRng::new(7);
        let x = rng.normal_tensor::<f64>([1, 2, 5, 5], 1.0);
        let w = rng.normal_tensor::<f64>([3, 2, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, ConvGeometry::new(2, 1)).unwrap();
        let o = oracle_conv(&x, &w, 2, 1);
        assert_eq!(y.dims(), [1, 3, 3, 3]);
        assert!(max_rel_err(&y, &o, 1e-12) <= 1e-6);
    }

    #[test]
    fn shape_and_argument_errors() {
        let x = Tensor4::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor4::<f32>::zeros([1, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, ConvGeometry::new(1, 1)), Err(Error::Shape(_))));
        let w = Tensor4::<f32>::zeros([1, 2, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, ConvGeometry::new(0, 1)), Err(Error::Argument(_))));
        let w = Tensor4::<f32>::zeros([1, 2, 7, 7]);
        assert!(matches!(conv2d_forward(&x, &w, ConvGeometry::new(1, 1)), Err(Error::Shape(_))));
        let gy = Tensor4::<f32>::zeros([1, 1, 3, 3]);
        let w = Tensor4::<f32>::zeros([1, 2, 3, 3]);
        assert!(matches!(conv2d_backward(&x, &w, &gy, ConvGeometry::new(1, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = SeededRng::new(3);
        let x = rng.normal_tensor::<f32>([2, 2, 5, 5], 1.0);
        let w = rng.normal_tensor::<f32>([3, 2, 3, 3], 1.0);
        let gy = Tensor4::zeros([2, 3, 5, 5]);
        let (gx, gw) = conv2d_backward(&x, &w, &gy, ConvGeometry::new(1, 1)).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_weight_gradient_matches_direct_sum() {
        let mut rng = SeededRng::new(4);
        let x = rng.normal_tensor::<f64>([2, 3, 4, 4], 1.0);
        let w = rng.normal_tensor::<f64>([2, 3, 1, 1], 1.0);
        let gy = rng.normal_tensor::<f64>([2, 2, 4, 4], 1.0);
        let (_, gw) = conv2d_backward(&x, &w, &gy, ConvGeometry::new(1, 0)).unwrap();
        for d in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for b in 0..2 {
                    for u in 0..4 {
                        for v in 0..4 {
                            acc += x.at([b, c, u, v]) * gy.at([b, d, u, v]);
                        }
                    }
                }
                assert!((gw.at([d, c, 0, 0]) - acc).abs() <= 1e-12 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn linear_in_kernel() {
        let mut rng = SeededRng::new(5);
        let x = rng.normal_tensor::<f64>([2, 3, 6, 6], 1.0);
        let w1 = rng.normal_tensor::<f64>([4, 3, 3, 3], 1.0);
        let w2 = rng.normal_tensor::<f64>([4, 3, 3, 3], 1.0);
        let g = ConvGeometry::new(2, 1);
        let lhs = conv2d_forward(&x, &w1.add(&w2).unwrap(), g).unwrap();
        let rhs = conv2d_forward(&x, &w1, g).unwrap().add(&conv2d_forward(&x, &w2, g).unwrap()).unwrap();
        assert!(max_rel_err(&lhs, &rhs, 1e-9) <= 1e-12);
    }
}
