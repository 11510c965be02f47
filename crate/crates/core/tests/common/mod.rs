//! Independent reference implementations for integration tests.
#![allow(dead_code)]

use csko_core::rng::SeededRng;
use csko_core::Tensor4;

/// Direct cross-correlation with explicit bounds checks on the unpadded input.
pub fn direct_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, stride: usize, pad: usize) -> Tensor4<f64> {
    let [nb, nc, h, wd] = x.dims();
    let [nd, wc, kh, kw] = w.dims();
    assert_eq!(nc, wc);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Tensor4::zeros([nb, nd, oh, ow]);
    for b in 0..nb {
        for d in 0..nd {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..nc {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let q = (j * stride + v) as isize - pad as isize;
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                    acc += x.at([b, c, r as usize, q as usize]) * w.at([d, c, u, v]);
                                }
                            }
                        }
                    }
                    y.set([b, d, i, j], acc);
                }
            }
        }
    }
    y
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn random(rng: &mut SeededRng, dims: [usize; 4]) -> Tensor4<f64> {
    rng.normal_tensor(dims, 1.0)
}
