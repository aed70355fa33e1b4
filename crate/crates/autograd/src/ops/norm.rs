//! Normalisation and resampling.

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// Standardise every slice along the last axis (biased variance).
    pub fn normalize_last(self, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().expect("normalize_last on rank-0 tensor");
        let eps = T::lit(eps);
        let dn = T::from_usize(d).expect("dim fits");
        let rows = x.len() / d;
        let mut y = Tensor::zeros(&shape);
        let mut inv_std = Vec::with_capacity(rows);
        for (xr, yr) in x.data().chunks(d).zip(y.data_mut().chunks_mut(d)) {
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let saved = y.clone();
        self.graph().push(
            y,
            &[self],
            Box::new(move |gy, _| {
                let mut gx = Tensor::zeros(&shape);
                for (((gr, yr), gxr), &is) in
                    gy.data().chunks(d).zip(saved.data().chunks(d)).zip(gx.data_mut().chunks_mut(d)).zip(&inv_std)
                {
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() / dn;
                    for ((o, &g), &v) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = is * (g - mg - v * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Per-sample, per-channel standardisation of `[N, C, H, W]` (no affine).
    pub fn instance_norm(self, eps: f64) -> Var<'g, T> {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "instance_norm expects [N, C, H, W], got {shape:?}");
        self.reshape(&[shape[0] * shape[1], shape[2] * shape[3]]).normalize_last(eps).reshape(&shape)
    }

    /// Bilinear resize of `[N, C, H, W]` with half-pixel centres
    /// (`align_corners = false`).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let &[n, c, h, w] = shape.as_slice() else {
            panic!("resize_bilinear expects [N, C, H, W], got {shape:?}");
        };
        let taps_y = taps::<T>(h, out_h);
        let taps_x = taps::<T>(w, out_w);
        let planes = n * c;
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        self.graph().push(
            out,
            &[self],
            Box::new(move |gy, _| {
                let mut gx = Tensor::zeros(&shape);
                for p in 0..planes {
                    let g = &gy.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                            let v = g[oy * out_w + ox];
                            dst[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                            dst[y0 * w + x1] += v * (T::one() - fy) * fx;
                            dst[y1 * w + x0] += v * fy * (T::one() - fx);
                            dst[y1 * w + x1] += v * fy * fx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// Source indices and blend weight for each output coordinate.
fn taps<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[3, 8], |i| (i as f64 * 1.3).sin() * 5.0 + 2.0));
        let y = x.normalize_last(0.0).value();
        for row in y.data().chunks(8) {
            let m: f64 = row.iter().sum::<f64>() / 8.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 5], 0.75));
        let y = x.resize_bilinear(12, 10).value();
        assert_eq!(y.shape(), &[1, 2, 12, 10]);
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn bilinear_doubling_matches_half_pixel_rule() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 4.0]).unwrap());
        let y = x.resize_bilinear(1, 4).value();
        // Centres at -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to the edge).
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
