//! Reductions and layout changes.

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph().push(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |gy, _| vec![Some(Tensor::full(&shape, gy.item()))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = Tensor::clone(&x).reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.graph().push(
            out,
            &[self],
            Box::new(move |gy, _| vec![Some(gy.clone().reshape(&in_shape).expect("same count"))]),
        )
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Var<'g, T> {
        let out = self.value().permute(perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph().push(out, &[self], Box::new(move |gy, _| vec![Some(gy.permute(&inverse))]))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let out = x.narrow(axis, start, len);
        let in_shape = x.shape().to_vec();
        self.graph().push(
            out,
            &[self],
            Box::new(move |gy, _| {
                let mut g = Tensor::zeros(&in_shape);
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let dim = in_shape[axis];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    g.data_mut()[dst..dst + len * inner].copy_from_slice(&gy.data()[src..src + len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut y = Tensor::zeros(&shape);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let m = (0..dim).map(|k| x.data()[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..dim {
                    let e = (x.data()[at(k)] - m).exp();
                    y.data_mut()[at(k)] = e;
                    z += e;
                }
                for k in 0..dim {
                    y.data_mut()[at(k)] /= z;
                }
            }
        }
        let saved = y.clone();
        self.graph().push(
            y,
            &[self],
            Box::new(move |gy, _| {
                let mut g = Tensor::zeros(&shape);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * dim + k) * inner + i;
                        let dot: T = (0..dim).map(|k| gy.data()[at(k)] * saved.data()[at(k)]).sum();
                        for k in 0..dim {
                            g.data_mut()[at(k)] = saved.data()[at(k)] * (gy.data()[at(k)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

/// Concatenation along `axis`. A var may appear more than once.
pub fn concat<'g, T: Scalar>(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::concat(&refs, axis).unwrap_or_else(|e| panic!("{e}"));
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    parts[0].graph().push(
        out,
        parts,
        Box::new(move |gy, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let g = need.then(|| gy.narrow(axis, start, len));
                    start += len;
                    g
                })
                .collect()
        }),
    )
}
