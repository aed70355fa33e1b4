//! Helpers shared by the unit tests.

#![allow(clippy::needless_range_loop)]

use crossmlp_autograd::{ParamKind, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Scalar>(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * scale)
    })
}

/// Every entry random: weights and biases `N(0, scale^2)`, gains
/// `1 + N(0, scale^2)`.
pub fn randomize<T: Scalar>(store: &mut ParamStore<T>, scale: f64, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let mut t = randn::<T>(&shape, scale, rng);
        if store.kind(id) == ParamKind::Gain {
            t = t.map(|v| v + T::one());
        }
        store.set(id, t).unwrap();
    }
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

/// Direct-loop reference convolution, `[N, Cin, H, W]` by `[Cout, Cin, k, k]`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[s, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[s, o, y, xx], acc);
                }
            }
        }
    }
    out
}

/// Direct-loop transposed convolution, weight `[Cin, Cout, k, k]`.
pub fn naive_conv_transpose(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[1], w.shape()[2]);
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    out.set(&[s, o, y, xx], b[o]);
                }
            }
        }
        for c in 0..ci {
            for y in 0..h {
                for xx in 0..wd {
                    for o in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (y * stride + ky) as isize - pad as isize;
                                let ox = (xx * stride + kx) as isize - pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let idx = [s, o, oy as usize, ox as usize];
                                    let v = out.at(&idx) + x.at(&[s, c, y, xx]) * w.at(&[c, o, ky, kx]);
                                    out.set(&idx, v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
