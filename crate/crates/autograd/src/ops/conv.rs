//! 2-D convolution and transposed convolution over `[N, C, H, W]` tensors.
//!
//! Both lower to `im2col` + GEMM per batch item. Batch items run in
//! parallel; weight gradients are reduced in batch order so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::graph::Var;
use crate::ops::linalg::{gemm, MatView};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per batch item: input gradient, flattened weight-gradient contribution.
type ItemGrads<T> = (Option<Tensor<T>>, Option<Vec<T>>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    fn out_len(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Output side length of a convolution, or `None` if the kernel does not fit.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Output side length of a transposed convolution.
pub fn conv_transpose_out_size(size: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    ((size - 1) * stride + kernel + out_pad).checked_sub(2 * pad)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let ol = g.out_len();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * ol..][..ol];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize + ki as isize - p;
                    let dst = &mut row[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kj as isize - p;
                        *d = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let ol = g.out_len();
    x.fill(T::zero());
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * ol..][..ol];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * s) as isize + kj as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += row[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sum_in_order<T: Scalar>(parts: Vec<Tensor<T>>) -> Tensor<T> {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for p in it {
        acc.add_assign(&p);
    }
    acc
}

fn mat<T>(data: &[T], rows: usize, cols: usize, t: bool) -> MatView<'_, T> {
    MatView { data, rows, cols, t }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Cross-correlation of `[N, Cin, H, W]` with weights `[Cout, Cin, k, k]`.
    pub fn conv2d(self, weight: Var<'g, T>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (&[n, cin, h, wd], &[cout, wcin, k, k2]) = (x.shape(), w.shape()) else {
            panic!("conv2d expects rank-4 input and weight, got {:?} and {:?}", x.shape(), w.shape());
        };
        assert_eq!(cin, wcin, "conv2d channel mismatch: input {:?}, weight {:?}", x.shape(), w.shape());
        assert_eq!(k, k2, "conv2d needs square kernels");
        let oh = conv_out_size(h, k, stride, pad).expect("conv2d kernel larger than padded input");
        let ow = conv_out_size(wd, k, stride, pad).expect("conv2d kernel larger than padded input");
        let geo =
            ConvGeometry { channels: cin, height: h, width: wd, kernel: k, stride, pad, out_height: oh, out_width: ow };
        let (in_len, out_len, pl) = (cin * h * wd, cout * oh * ow, geo.patch_len());

        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        out.data_mut().par_chunks_mut(out_len).zip(x.data().par_chunks(in_len)).for_each(|(y, xi)| {
            let mut cols = vec![T::zero(); pl * geo.out_len()];
            im2col(xi, &geo, &mut cols);
            gemm(mat(w.data(), cout, pl, false), mat(&cols, pl, geo.out_len(), false), T::zero(), y);
        });

        self.graph().push(
            out,
            &[self, weight],
            Box::new(move |gy, needs| {
                let per_item: Vec<ItemGrads<T>> = gy
                    .data()
                    .par_chunks(out_len)
                    .zip(x.data().par_chunks(in_len))
                    .map(|(gyi, xi)| {
                        let gw = needs[1].then(|| {
                            let mut cols = vec![T::zero(); pl * geo.out_len()];
                            im2col(xi, &geo, &mut cols);
                            let mut gw = Tensor::zeros(&[cout, cin, k, k]);
                            gemm(
                                mat(gyi, cout, geo.out_len(), false),
                                mat(&cols, pl, geo.out_len(), true),
                                T::zero(),
                                gw.data_mut(),
                            );
                            gw
                        });
                        let gx = needs[0].then(|| {
                            let mut gcols = vec![T::zero(); pl * geo.out_len()];
                            gemm(
                                mat(w.data(), cout, pl, true),
                                mat(gyi, cout, geo.out_len(), false),
                                T::zero(),
                                &mut gcols,
                            );
                            let mut gx = vec![T::zero(); in_len];
                            col2im(&gcols, &geo, &mut gx);
                            gx
                        });
                        (gw, gx)
                    })
                    .collect();
                let (gws, gxs): (Vec<_>, Vec<_>) = per_item.into_iter().unzip();
                let gx = needs[0].then(|| {
                    let data = gxs.into_iter().flat_map(|g| g.expect("requested")).collect();
                    Tensor::from_vec(x.shape(), data).expect("input shape")
                });
                let gw = needs[1].then(|| sum_in_order(gws.into_iter().map(|g| g.expect("requested")).collect()));
                vec![gx, gw]
            }),
        )
    }

    /// Transposed convolution of `[N, Cin, H, W]` with weights
    /// `[Cin, Cout, k, k]`; output side `(H-1)*stride - 2*pad + k + out_pad`.
    pub fn conv_transpose2d(self, weight: Var<'g, T>, stride: usize, pad: usize, out_pad: usize) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (&[n, cin, h, wd], &[wcin, cout, k, k2]) = (x.shape(), w.shape()) else {
            panic!("conv_transpose2d expects rank-4 input and weight, got {:?} and {:?}", x.shape(), w.shape());
        };
        assert_eq!(cin, wcin, "conv_transpose2d channel mismatch: {:?} vs {:?}", x.shape(), w.shape());
        assert_eq!(k, k2, "conv_transpose2d needs square kernels");
        assert!(out_pad < stride.max(1), "output padding must be smaller than stride");
        let oh = conv_transpose_out_size(h, k, stride, pad, out_pad).expect("non-negative output");
        let ow = conv_transpose_out_size(wd, k, stride, pad, out_pad).expect("non-negative output");
        // Geometry of the forward convolution this op is the adjoint of.
        let geo = ConvGeometry {
            channels: cout,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
            out_height: h,
            out_width: wd,
        };
        let (in_len, out_len, pl, hw) = (cin * h * wd, cout * oh * ow, geo.patch_len(), h * wd);

        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        out.data_mut().par_chunks_mut(out_len).zip(x.data().par_chunks(in_len)).for_each(|(y, xi)| {
            let mut cols = vec![T::zero(); pl * hw];
            gemm(mat(w.data(), cin, pl, true), mat(xi, cin, hw, false), T::zero(), &mut cols);
            col2im(&cols, &geo, y);
        });

        self.graph().push(
            out,
            &[self, weight],
            Box::new(move |gy, needs| {
                let per_item: Vec<ItemGrads<T>> = gy
                    .data()
                    .par_chunks(out_len)
                    .zip(x.data().par_chunks(in_len))
                    .map(|(gyi, xi)| {
                        let mut gcols = vec![T::zero(); pl * hw];
                        im2col(gyi, &geo, &mut gcols);
                        let gw = needs[1].then(|| {
                            let mut gw = Tensor::zeros(&[cin, cout, k, k]);
                            gemm(mat(xi, cin, hw, false), mat(&gcols, pl, hw, true), T::zero(), gw.data_mut());
                            gw
                        });
                        let gx = needs[0].then(|| {
                            let mut gx = vec![T::zero(); in_len];
                            gemm(mat(w.data(), cin, pl, false), mat(&gcols, pl, hw, false), T::zero(), &mut gx);
                            gx
                        });
                        (gw, gx)
                    })
                    .collect();
                let (gws, gxs): (Vec<_>, Vec<_>) = per_item.into_iter().unzip();
                let gx = needs[0].then(|| {
                    let data = gxs.into_iter().flat_map(|g| g.expect("requested")).collect();
                    Tensor::from_vec(x.shape(), data).expect("input shape")
                });
                let gw = needs[1].then(|| sum_in_order(gws.into_iter().map(|g| g.expect("requested")).collect()));
                vec![gx, gw]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    /// Direct nested-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(&[b, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ki, kj]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, co, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    /// Scatter definition of the transposed convolution.
    fn naive_deconv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize, op: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[1], w.shape()[2]);
        let oh = (h - 1) * s + k + op - 2 * p;
        let ow = (wd - 1) * s + k + op - 2 * p;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..wd {
                        for co in 0..cout {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let oy = (iy * s + ki) as isize - p as isize;
                                    let ox = (ix * s + kj) as isize - p as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        let idx = [b, co, oy as usize, ox as usize];
                                        let v = out.at(&idx) + x.at(&[b, ci, iy, ix]) * w.at(&[ci, co, ki, kj]);
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

    fn wave(shape: &[usize], phase: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64) * 0.731 + phase).sin())
    }

    #[test]
    fn conv2d_matches_naive() {
        for &(s, p, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 1), (1, 2, 5)] {
            let x = wave(&[2, 3, 7, 6], 0.1);
            let w = wave(&[4, 3, k, k], 0.9);
            let g = Graph::new();
            let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), s, p).value();
            let want = naive_conv(&x, &w, s, p);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "s={s} p={p} k={k}");
            }
        }
    }

    #[test]
    fn conv_transpose2d_matches_scatter_definition() {
        for &(s, p, k, op) in &[(2, 1, 4, 0), (1, 1, 3, 0), (2, 1, 3, 1), (2, 0, 2, 0)] {
            let x = wave(&[2, 3, 4, 5], 0.3);
            let w = wave(&[3, 2, k, k], 1.7);
            let g = Graph::new();
            let y = g.constant(x.clone()).conv_transpose2d(g.constant(w.clone()), s, p, op).value();
            let want = naive_deconv(&x, &w, s, p, op);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "s={s} p={p} k={k} op={op}");
            }
        }
    }

    #[test]
    fn stride_two_k4_halves_and_doubles() {
        assert_eq!(super::conv_out_size(64, 4, 2, 1), Some(32));
        assert_eq!(super::conv_transpose_out_size(32, 4, 2, 1, 0), Some(64));
        assert_eq!(super::conv_out_size(2, 5, 1, 0), None);
    }
}
